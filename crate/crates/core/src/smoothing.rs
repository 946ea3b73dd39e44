//! Stage-1 mixup smoothing of a frozen encoder's latent space.
//!
//! Two single-cell profiles are interpolated with a fresh `λ ~ U[0, 1]`, pushed
//! through the frozen encoder, MLP-A and a linear classifier, and the output is
//! regressed onto the equally interpolated one-hot cell-type target. Afterwards
//! MLP-A is frozen and reused by the survival model.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numnet::{mse_loss, sgd_step, Activation, Checkpoint, DenseLayer, Matrix, Mlp, ParamGroup};

pub const DEFAULT_NUM_TYPES: usize = 17;

/// One single-cell expression profile with its cell type.
#[derive(Debug, Clone, PartialEq)]
pub struct CellProfile {
    expression: Vec<f64>,
    cell_type: usize,
    num_types: usize,
}

impl CellProfile {
    pub fn new(expression: Vec<f64>, cell_type: usize, num_types: usize) -> Result<Self> {
        if cell_type >= num_types {
            return Err(Error::invalid(
                "cell_type",
                format!("{cell_type} not below {num_types}"),
            ));
        }
        if expression.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("expression", "entries must be finite and non-negative"));
        }
        Ok(Self {
            expression,
            cell_type,
            num_types,
        })
    }

    pub fn expression(&self) -> &[f64] {
        &self.expression
    }

    pub fn cell_type(&self) -> usize {
        self.cell_type
    }

    pub fn num_types(&self) -> usize {
        self.num_types
    }

    pub fn one_hot(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.num_types];
        t[self.cell_type] = 1.0;
        t
    }
}

/// `λ·a + (1 − λ)·b` for both expression and target.
#[derive(Debug, Clone, PartialEq)]
pub struct MixupSample {
    pub mixed_expression: Vec<f64>,
    pub lambda: f64,
    pub target: Vec<f64>,
}

pub fn mix_samples(a: &CellProfile, b: &CellProfile, lambda: f64) -> Result<MixupSample> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid("lambda", format!("{lambda} not in [0, 1]")));
    }
    if a.expression.len() != b.expression.len() {
        return Err(Error::shape("mix_samples expression", a.expression.len(), b.expression.len()));
    }
    if a.num_types != b.num_types {
        return Err(Error::shape("mix_samples num_types", a.num_types, b.num_types));
    }
    let mixed_expression = mix_vectors(&a.expression, &b.expression, lambda);
    let mut target = vec![0.0; a.num_types];
    target[a.cell_type] += lambda;
    target[b.cell_type] += 1.0 - lambda;
    Ok(MixupSample {
        mixed_expression,
        lambda,
        target,
    })
}

/// Elementwise `λ·x + (1 − λ)·y`; exact at both endpoints.
fn mix_vectors(x: &[f64], y: &[f64], lambda: f64) -> Vec<f64> {
    if lambda == 1.0 {
        return x.to_vec();
    }
    if lambda == 0.0 {
        return y.to_vec();
    }
    x.iter()
        .zip(y)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect()
}

/// Fixed, never-trained encoder `act(W·x + c)` standing in for a pretrained
/// single-cell foundation model.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    weight: Matrix,
    bias: Vec<f64>,
    activation: Activation,
}

/// Gain of the default random projection; large enough that tanh saturates on
/// typical expression profiles.
const ENCODER_GAIN: f64 = 3.0;

/// Seeded random projection followed by tanh.
pub fn default_encoder(gene_dim: usize, embed_dim: usize, seed: u64) -> Result<FrozenEncoder> {
    if gene_dim == 0 || embed_dim == 0 {
        return Err(Error::invalid("encoder dims", format!("{gene_dim} -> {embed_dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = ENCODER_GAIN / (gene_dim as f64).sqrt();
    let data = (0..gene_dim * embed_dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
        .collect();
    let weight = Matrix::from_vec(embed_dim, gene_dim, data)?;
    let bias = (0..embed_dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
    FrozenEncoder::from_parts(weight, bias, Activation::Tanh)
}

impl FrozenEncoder {
    pub fn from_parts(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        // validates shapes and finiteness
        DenseLayer::from_parts(weight.clone(), bias.clone(), activation)?;
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn gene_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.gene_dim() {
            return Err(Error::shape("encoder input", self.gene_dim(), x.cols()));
        }
        let mut z = x.matmul_t(&self.weight)?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&self.bias) {
                *v = self.activation.apply(*v + b);
            }
        }
        Ok(z)
    }

    pub fn encode_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode(&Matrix::row_vector(x)?)?.into_vec())
    }

    /// Bit pattern of every parameter; equal fingerprints mean identical encoders.
    pub fn fingerprint(&self) -> Vec<u64> {
        self.weight
            .as_slice()
            .iter()
            .chain(&self.bias)
            .map(|v| v.to_bits())
            .collect()
    }

    pub fn put(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        ck.set_meta(&format!("{prefix}.activation"), self.activation.name())?;
        ck.insert(&format!("{prefix}.weight"), self.weight.clone())?;
        ck.insert(&format!("{prefix}.bias"), Matrix::row_vector(&self.bias)?)
    }

    pub fn get(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let missing = |what: &str| Error::Format {
            path: "<checkpoint>".into(),
            reason: format!("missing {prefix}.{what}"),
        };
        let act = ck
            .meta(&format!("{prefix}.activation"))
            .and_then(Activation::from_name)
            .ok_or_else(|| missing("activation"))?;
        let w = ck.tensor(&format!("{prefix}.weight")).ok_or_else(|| missing("weight"))?;
        let b = ck.tensor(&format!("{prefix}.bias")).ok_or_else(|| missing("bias"))?;
        Self::from_parts(w.clone(), b.as_slice().to_vec(), act)
    }

    /// Loads an externally supplied encoder stored with [`FrozenEncoder::put`]
    /// under the `encoder` prefix.
    pub fn load(path: &Path) -> Result<Self> {
        Self::get(&Checkpoint::read(path)?, "encoder")
    }
}

/// Synthetic single-cell corpus: Gaussian clusters around per-type centroids,
/// clamped at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellCorpusSpec {
    pub num_types: usize,
    pub cells_per_type: usize,
    pub gene_dim: usize,
    /// Within-cluster standard deviation.
    pub spread: f64,
    /// Seeds the centroids; shared with the cohort generator so bulk
    /// expression is built from the same cell types.
    pub atlas_seed: u64,
    pub seed: u64,
}

impl Default for CellCorpusSpec {
    fn default() -> Self {
        Self {
            num_types: DEFAULT_NUM_TYPES,
            cells_per_type: 40,
            gene_dim: 64,
            spread: 0.3,
            atlas_seed: 17,
            seed: 0,
        }
    }
}

impl CellCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_types < 2 {
            return Err(Error::invalid("cells.num_types", "need at least 2"));
        }
        if self.cells_per_type == 0 {
            return Err(Error::invalid("cells.cells_per_type", "must be positive"));
        }
        if self.gene_dim == 0 {
            return Err(Error::invalid("cells.gene_dim", "must be positive"));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err(Error::invalid("cells.spread", "must be non-negative"));
        }
        Ok(())
    }
}

/// Per-type mean expression profiles, rows = cell types.
pub fn cell_type_atlas(num_types: usize, gene_dim: usize, atlas_seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(atlas_seed ^ 0xA71A_5EED);
    let data = (0..num_types * gene_dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (1.0 + 1.5 * z).max(0.0)
        })
        .collect();
    Matrix::from_vec(num_types, gene_dim, data).expect("atlas shape")
}

pub fn generate_cells(spec: &CellCorpusSpec) -> Result<Vec<CellProfile>> {
    spec.validate()?;
    let atlas = cell_type_atlas(spec.num_types, spec.gene_dim, spec.atlas_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cells = Vec::with_capacity(spec.num_types * spec.cells_per_type);
    for _ in 0..spec.cells_per_type {
        for t in 0..spec.num_types {
            let expr = atlas
                .row(t)
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (m + spec.spread * z).max(0.0)
                })
                .collect();
            cells.push(CellProfile::new(expr, t, spec.num_types)?);
        }
    }
    Ok(cells)
}

/// Writes `gene_0..gene_{d-1},cell_type`.
pub fn write_cells_csv(path: &Path, cells: &[CellProfile]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    let dim = cells.first().map_or(0, |c| c.expression.len());
    let mut header: Vec<String> = (0..dim).map(|g| format!("gene_{g}")).collect();
    header.push("cell_type".into());
    w.write_record(&header)?;
    for c in cells {
        let mut row: Vec<String> = c.expression.iter().map(|v| v.to_string()).collect();
        row.push(c.cell_type.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a cell corpus written by [`write_cells_csv`].
pub fn load_cells_csv(path: &Path, num_types: usize) -> Result<Vec<CellProfile>> {
    let bad = |row: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        reason,
    };
    let mut r = csv::ReaderBuilder::new().from_path(path)?;
    let header = r.headers()?.clone();
    let dim = header.len().saturating_sub(1);
    for (g, h) in header.iter().take(dim).enumerate() {
        if h != format!("gene_{g}") {
            return Err(bad(1, format!("expected column gene_{g}, found {h:?}")));
        }
    }
    if header.get(dim) != Some("cell_type") || dim == 0 {
        return Err(bad(1, "missing cell_type column".into()));
    }
    let mut cells = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        if rec.len() != dim + 1 {
            return Err(bad(row, format!("expected {} fields, found {}", dim + 1, rec.len())));
        }
        let expr = rec
            .iter()
            .take(dim)
            .map(|s| s.parse::<f64>().map_err(|_| bad(row, format!("bad number {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let t: usize = rec[dim]
            .parse()
            .map_err(|_| bad(row, format!("bad cell_type {:?}", &rec[dim])))?;
        cells.push(CellProfile::new(expr, t, num_types).map_err(|e| bad(row, e.to_string()))?);
    }
    if cells.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "no cells".into(),
        });
    }
    Ok(cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaMode {
    /// Fresh `λ ~ U[0, 1]` per pair per step.
    Uniform,
    /// Constant `λ`; `1.0` reduces to plain per-cell regression.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub hidden_dim: usize,
    /// Output width of MLP-A.
    pub feature_dim: usize,
    pub lambda: LambdaMode,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            eta: 0.5,
            hidden_dim: 128,
            feature_dim: 32,
            lambda: LambdaMode::Uniform,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::invalid("smoothing.batch_size", "must be positive"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("smoothing.eta", "must be positive"));
        }
        if self.hidden_dim == 0 || self.feature_dim == 0 {
            return Err(Error::invalid("smoothing dims", "must be positive"));
        }
        if let LambdaMode::Fixed(l) = self.lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::invalid("smoothing.lambda", format!("{l} not in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// MLP-A at initialisation: `embed → hidden → hidden → feature`, relu between.
pub fn init_mlp_a(embed_dim: usize, cfg: &Stage1Config) -> Result<Mlp> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Mlp::new(
        &[embed_dim, cfg.hidden_dim, cfg.hidden_dim, cfg.feature_dim],
        Activation::Relu,
        Activation::Identity,
        &mut rng,
    )
}

#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    pub mlp_a: Mlp,
    pub classifier: DenseLayer,
    /// Loss of every optimisation step.
    pub step_losses: Vec<f64>,
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
}

impl Stage1Outcome {
    /// Classifier outputs for unmixed cells, one row per cell.
    pub fn predict(&self, encoder: &FrozenEncoder, cells: &[CellProfile]) -> Result<Matrix> {
        let x = Matrix::from_rows(&cells.iter().map(|c| c.expression.as_slice()).collect::<Vec<_>>())?;
        let h = self.mlp_a.infer(&encoder.encode(&x)?)?;
        self.classifier.infer(&h)
    }

    pub fn to_checkpoint(&self, encoder: &FrozenEncoder) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        let names = ck.put_mlp("mlp_a", &self.mlp_a)?;
        ck.set_group("mlp_a", names)?;
        let cls = Mlp::from_layers(vec![self.classifier.clone()])?;
        let names = ck.put_mlp("classifier", &cls)?;
        ck.set_group("classifier", names)?;
        encoder.put(&mut ck, "encoder")?;
        ck.set_group("encoder", vec!["encoder.weight".into(), "encoder.bias".into()])?;
        Ok(ck)
    }
}

/// Trains MLP-A and the linear cell-type head by mixup regression. The
/// encoder is only read.
pub fn pretrain_mlp_a(
    cells: &[CellProfile],
    encoder: &FrozenEncoder,
    cfg: &Stage1Config,
) -> Result<Stage1Outcome> {
    cfg.validate()?;
    if cells.len() < 2 {
        return Err(Error::invalid("cells", "need at least 2"));
    }
    let num_types = cells[0].num_types;
    let mut seen = vec![false; num_types];
    for c in cells {
        if c.num_types != num_types || c.expression.len() != encoder.gene_dim() {
            return Err(Error::shape(
                "cell profile",
                format!("{} genes / {num_types} types", encoder.gene_dim()),
                format!("{} genes / {} types", c.expression.len(), c.num_types),
            ));
        }
        seen[c.cell_type] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::invalid("cells", "need at least 2 distinct cell types"));
    }

    let mut mlp_a = init_mlp_a(encoder.embed_dim(), cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut classifier = DenseLayer::new(cfg.feature_dim, num_types, Activation::Identity, &mut rng);
    let steps_per_epoch = cells.len().div_ceil(cfg.batch_size);
    let idx: Vec<usize> = (0..cells.len()).collect();

    let mut step_losses = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..steps_per_epoch {
            let mut xs = Vec::with_capacity(cfg.batch_size);
            let mut ts = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let pair: Vec<&usize> = idx.choose_multiple(&mut rng, 2).collect();
                let lambda = match cfg.lambda {
                    LambdaMode::Uniform => rng.random_range(0.0..=1.0),
                    LambdaMode::Fixed(l) => l,
                };
                let m = mix_samples(&cells[*pair[0]], &cells[*pair[1]], lambda)?;
                xs.push(m.mixed_expression);
                ts.push(m.target);
            }
            let x = encoder.encode(&Matrix::from_rows(&xs)?)?;
            let target = Matrix::from_rows(&ts)?;
            let h = mlp_a.forward(&x)?;
            let y = classifier.forward(&h)?;
            let (loss, dy) = mse_loss(&y, &target)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("stage-1 loss".into()));
            }
            let dh = classifier.backward(&dy)?;
            mlp_a.backward(&dh)?;
            let mut groups = [
                ParamGroup::new("mlp_a", mlp_a.tensors_mut()),
                ParamGroup::new("classifier", classifier.tensors_mut().into()),
            ];
            sgd_step(&mut groups, cfg.eta)?;
            step_losses.push(loss);
            total += loss;
        }
        epoch_losses.push(total / steps_per_epoch as f64);
    }
    for l in mlp_a.layers_mut() {
        l.clear_cache();
    }
    classifier.clear_cache();
    Ok(Stage1Outcome {
        mlp_a,
        classifier,
        step_losses,
        epoch_losses,
    })
}

/// Mean distance between the latent code of a mixed input and the same mix of
/// the endpoint codes, `‖E(mix(x_i, x_j, λ)) − [λE(x_i) + (1 − λ)E(x_j)]‖₂`
/// with `E = mlp_a ∘ encoder`, over every pair and every `λ`.
///
/// Each distance is divided by `‖E(x_i) − E(x_j)‖₂`, which makes the gap
/// invariant to the overall scale of `E`; a freshly initialised MLP-A is
/// otherwise favoured just for producing small outputs.
pub fn interpolation_gap(
    encoder: &FrozenEncoder,
    mlp_a: &Mlp,
    pairs: &[(Vec<f64>, Vec<f64>)],
    lambdas: &[f64],
) -> Result<f64> {
    if pairs.is_empty() || lambdas.is_empty() {
        return Err(Error::invalid("interpolation_gap", "no pairs or no lambdas"));
    }
    let embed = |x: &[f64]| -> Result<Vec<f64>> {
        Ok(mlp_a.infer(&encoder.encode(&Matrix::row_vector(x)?)?)?.into_vec())
    };
    let mut total = 0.0;
    for (a, b) in pairs {
        if a.len() != b.len() {
            return Err(Error::shape("interpolation_gap pair", a.len(), b.len()));
        }
        let ea = embed(a)?;
        let eb = embed(b)?;
        let span = ea
            .iter()
            .zip(&eb)
            .map(|(p, q)| (p - q).powi(2))
            .sum::<f64>()
            .sqrt();
        for &l in lambdas {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::invalid("lambda", format!("{l} not in [0, 1]")));
            }
            let em = embed(&mix_vectors(a, b, l))?;
            let lin = mix_vectors(&ea, &eb, l);
            total += em
                .iter()
                .zip(&lin)
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                .sqrt()
                / span.max(f64::MIN_POSITIVE);
        }
    }
    Ok(total / (pairs.len() * lambdas.len()) as f64)
}

/// Random held-out pairs of distinct cells for [`interpolation_gap`].
pub fn sample_pairs(cells: &[CellProfile], n: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..cells.len()).collect();
    (0..n)
        .map(|_| {
            let p: Vec<&usize> = idx.choose_multiple(&mut rng, 2).collect();
            (cells[*p[0]].expression.clone(), cells[*p[1]].expression.clone())
        })
        .collect()
}
