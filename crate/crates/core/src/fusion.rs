//! Stage-2 survival model: a genomic branch (SNN on CNV/mutations, frozen
//! encoder + frozen MLP-A on RNA, trainable MLP-B on their concatenation) and
//! an image branch feed a linear fusion head that outputs the log hazard `θ`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modulation::{apply_modulation, branch_scores, contribution_ratio, ContributionReport, ModulationConfig};
use crate::numnet::{dot, Activation, Checkpoint, Matrix, Mlp, ParamGroup, Sgd, Tensor};
use crate::smoothing::FrozenEncoder;
use crate::survival::{concordance_index, cox_gradient, cox_loss, CoxBatch, SurvivalRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// `θ = W^G·G + W^P·P + b`.
    Concat,
    /// `θ = w · vec([G‖1] ⊗ [P‖1]) + b`.
    Kronecker,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Concat => "concat",
            FusionMode::Kronecker => "kronecker",
        }
    }
}

/// Layer widths of the trainable parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub snn_hidden: usize,
    pub snn_out: usize,
    pub hidden_dim: usize,
    /// Width of `G`, the MLP-B output.
    pub genomic_dim: usize,
    pub image_hidden: usize,
    /// Width of `P`, the image-encoder output.
    pub image_dim: usize,
    pub fusion_mode: FusionMode,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            snn_hidden: 64,
            snn_out: 32,
            hidden_dim: 128,
            genomic_dim: 32,
            image_hidden: 64,
            image_dim: 32,
            fusion_mode: FusionMode::Concat,
        }
    }
}

/// Genomic inputs of one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct GenomicInput {
    pub cnv_mut: Vec<f64>,
    pub rna: Vec<f64>,
}

/// Linear fusion head. In concat mode `weight = [W^G ‖ W^P]`.
#[derive(Debug, Clone, PartialEq)]
struct Head {
    weight: Vec<f64>,
    bias: [f64; 1],
    grad_weight: Vec<f64>,
    grad_bias: [f64; 1],
}

impl Head {
    fn new<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (width as f64).sqrt();
        Self {
            weight: (0..width).map(|_| rng.random_range(-bound..=bound)).collect(),
            bias: [0.0],
            grad_weight: vec![0.0; width],
            grad_bias: [0.0],
        }
    }

    fn tensors_mut(&mut self) -> Vec<Tensor<'_>> {
        vec![
            Tensor::new(&mut self.weight, &mut self.grad_weight),
            Tensor::new(&mut self.bias, &mut self.grad_bias),
        ]
    }
}

/// `vec([g‖1] ⊗ [p‖1])`, row-major, length `(|g|+1)(|p|+1)`.
pub fn kronecker_fusion(g: &[f64], p: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity((g.len() + 1) * (p.len() + 1));
    for gi in g.iter().copied().chain(std::iter::once(1.0)) {
        out.extend(p.iter().map(|pj| gi * pj));
        out.push(gi);
    }
    out
}

/// Per-batch model inputs; `rna_features` is the frozen `MLP_A(encoder(rna))`.
#[derive(Debug, Clone)]
pub struct BatchInputs {
    pub cnv_mut: Matrix,
    pub rna_features: Matrix,
    pub image: Matrix,
}

/// What `backward` needs from `forward`.
#[derive(Debug, Clone)]
pub struct Forward {
    pub g: Matrix,
    pub p: Matrix,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FusionModel {
    snn: Mlp,
    encoder: FrozenEncoder,
    mlp_a: Mlp,
    mlp_b: Mlp,
    image_encoder: Mlp,
    head: Head,
    mode: FusionMode,
    /// Per-feature `(mean, scale)` applied to the frozen RNA features.
    rna_norm: Option<(Vec<f64>, Vec<f64>)>,
}

impl FusionModel {
    /// Builds a model around a frozen encoder and MLP-A. Trainable parts are
    /// initialised from `seed`.
    pub fn new(
        arch: &Architecture,
        dim_cnv_mut: usize,
        dim_image: usize,
        encoder: FrozenEncoder,
        mlp_a: Mlp,
        seed: u64,
    ) -> Result<Self> {
        if mlp_a.in_dim() != encoder.embed_dim() {
            return Err(Error::shape("MLP-A input", encoder.embed_dim(), mlp_a.in_dim()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let snn = Mlp::new(
            &[dim_cnv_mut, arch.snn_hidden, arch.snn_out],
            Activation::Selu,
            Activation::Selu,
            &mut rng,
        )?;
        let mlp_b = Mlp::new(
            &[arch.snn_out + mlp_a.out_dim(), arch.hidden_dim, arch.hidden_dim, arch.genomic_dim],
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        )?;
        let image_encoder = Mlp::new(
            &[dim_image, arch.image_hidden, arch.image_dim],
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        )?;
        let width = match arch.fusion_mode {
            FusionMode::Concat => arch.genomic_dim + arch.image_dim,
            FusionMode::Kronecker => (arch.genomic_dim + 1) * (arch.image_dim + 1),
        };
        let head = Head::new(width, &mut rng);
        Ok(Self {
            snn,
            encoder,
            mlp_a,
            mlp_b,
            image_encoder,
            head,
            mode: arch.fusion_mode,
            rna_norm: None,
        })
    }

    pub fn mode(&self) -> FusionMode {
        self.mode
    }

    pub fn encoder(&self) -> &FrozenEncoder {
        &self.encoder
    }

    pub fn mlp_a(&self) -> &Mlp {
        &self.mlp_a
    }

    pub fn genomic_dim(&self) -> usize {
        self.mlp_b.out_dim()
    }

    pub fn image_dim(&self) -> usize {
        self.image_encoder.out_dim()
    }

    /// `(W^G, W^P, b)`; concat mode only.
    pub fn head_blocks(&self) -> Result<(&[f64], &[f64], f64)> {
        self.require_concat()?;
        let (wg, wp) = self.head.weight.split_at(self.genomic_dim());
        Ok((wg, wp, self.head.bias[0]))
    }

    /// Overwrites the head; `weight` is `[W^G ‖ W^P]` in concat mode.
    pub fn set_head(&mut self, weight: &[f64], bias: f64) -> Result<()> {
        if weight.len() != self.head.weight.len() {
            return Err(Error::shape("head weight", self.head.weight.len(), weight.len()));
        }
        self.head.weight.copy_from_slice(weight);
        self.head.bias = [bias];
        Ok(())
    }

    fn require_concat(&self) -> Result<()> {
        if self.mode != FusionMode::Concat {
            return Err(Error::State(format!(
                "operation needs concat fusion, model uses {}",
                self.mode.name()
            )));
        }
        Ok(())
    }

    /// Frozen RNA path `MLP_A(encoder(rna))` for a batch of expression rows,
    /// standardised once [`FusionModel::calibrate_rna`] has run.
    pub fn rna_features(&self, rna: &Matrix) -> Result<Matrix> {
        let mut f = self.mlp_a.infer(&self.encoder.encode(rna)?)?;
        if let Some((mean, scale)) = &self.rna_norm {
            for r in 0..f.rows() {
                for ((v, m), s) in f.row_mut(r).iter_mut().zip(mean).zip(scale) {
                    *v = (*v - m) / s;
                }
            }
        }
        Ok(f)
    }

    /// Fixes the RNA feature standardisation from training expression rows.
    /// Features with no spread keep scale 1.
    pub fn calibrate_rna(&mut self, rna: &Matrix) -> Result<()> {
        if rna.rows() == 0 {
            return Err(Error::invalid("rna calibration", "no rows"));
        }
        self.rna_norm = None;
        let f = self.rna_features(rna)?;
        let n = f.rows() as f64;
        let mut mean = vec![0.0; f.cols()];
        for row in f.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; f.cols()];
        for row in f.iter_rows() {
            for ((s, v), m) in scale.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
        }
        self.rna_norm = Some((mean, scale));
        Ok(())
    }

    /// `G = MLP_B([SNN(cnv_mut) ‖ MLP_A(encoder(rna))])` for one patient.
    pub fn genomic_branch(&self, input: &GenomicInput) -> Result<Vec<f64>> {
        let g1 = self.snn.infer(&Matrix::row_vector(&input.cnv_mut)?)?;
        let g2 = self.rna_features(&Matrix::row_vector(&input.rna)?)?;
        Ok(self.mlp_b.infer(&g1.hstack(&g2)?)?.into_vec())
    }

    pub fn image_branch(&self, image: &[f64]) -> Result<Vec<f64>> {
        Ok(self.image_encoder.infer(&Matrix::row_vector(image)?)?.into_vec())
    }

    /// `θ = W^G·G + W^P·P + b`, accumulated left to right so the result equals
    /// the single-matrix form `W·[G‖P] + b` bit for bit.
    pub fn fused_hazard(&self, g: &[f64], p: &[f64]) -> Result<f64> {
        let (wg, wp, b) = self.head_blocks()?;
        if g.len() != wg.len() || p.len() != wp.len() {
            return Err(Error::shape(
                "fused_hazard",
                format!("{}+{}", wg.len(), wp.len()),
                format!("{}+{}", g.len(), p.len()),
            ));
        }
        let mut acc = 0.0;
        for (w, x) in wg.iter().zip(g) {
            acc += w * x;
        }
        for (w, x) in wp.iter().zip(p) {
            acc += w * x;
        }
        Ok(acc + b)
    }

    fn head_theta(&self, g: &[f64], p: &[f64]) -> f64 {
        match self.mode {
            FusionMode::Concat => {
                let (wg, wp) = self.head.weight.split_at(g.len());
                let mut acc = 0.0;
                for (w, x) in wg.iter().zip(g) {
                    acc += w * x;
                }
                for (w, x) in wp.iter().zip(p) {
                    acc += w * x;
                }
                acc + self.head.bias[0]
            }
            FusionMode::Kronecker => dot(&self.head.weight, &kronecker_fusion(g, p)) + self.head.bias[0],
        }
    }

    fn check_inputs(&self, x: &BatchInputs) -> Result<()> {
        let n = x.cnv_mut.rows();
        if x.rna_features.rows() != n || x.image.rows() != n {
            return Err(Error::shape(
                "batch rows",
                n,
                format!("{} / {}", x.rna_features.rows(), x.image.rows()),
            ));
        }
        if x.rna_features.cols() != self.mlp_a.out_dim() {
            return Err(Error::shape("rna features", self.mlp_a.out_dim(), x.rna_features.cols()));
        }
        Ok(())
    }

    /// Training forward pass; caches activations for [`FusionModel::backward`].
    pub fn forward(&mut self, x: &BatchInputs) -> Result<Forward> {
        self.check_inputs(x)?;
        let g1 = self.snn.forward(&x.cnv_mut)?;
        let g = self.mlp_b.forward(&g1.hstack(&x.rna_features)?)?;
        let p = self.image_encoder.forward(&x.image)?;
        let theta = (0..g.rows()).map(|k| self.head_theta(g.row(k), p.row(k))).collect();
        Ok(Forward { g, p, theta })
    }

    /// Inference forward pass; no caches touched.
    pub fn predict_batch(&self, x: &BatchInputs) -> Result<Forward> {
        self.check_inputs(x)?;
        let g1 = self.snn.infer(&x.cnv_mut)?;
        let g = self.mlp_b.infer(&g1.hstack(&x.rna_features)?)?;
        let p = self.image_encoder.infer(&x.image)?;
        let theta = (0..g.rows()).map(|k| self.head_theta(g.row(k), p.row(k))).collect();
        Ok(Forward { g, p, theta })
    }

    /// Backpropagates `dL/dθ` into the head, MLP-B, SNN and image encoder.
    /// The encoder and MLP-A receive nothing.
    pub fn backward(&mut self, fwd: &Forward, dtheta: &[f64]) -> Result<()> {
        let n = fwd.theta.len();
        if dtheta.len() != n {
            return Err(Error::shape("dtheta", n, dtheta.len()));
        }
        let dg_w = fwd.g.cols();
        let dp_w = fwd.p.cols();
        let mut dg = Matrix::zeros(n, dg_w);
        let mut dp = Matrix::zeros(n, dp_w);
        self.head.grad_weight.fill(0.0);
        self.head.grad_bias = [dtheta.iter().sum()];
        match self.mode {
            FusionMode::Concat => {
                let (wg, wp) = self.head.weight.split_at(dg_w);
                for k in 0..n {
                    let d = dtheta[k];
                    let (gw_g, gw_p) = self.head.grad_weight.split_at_mut(dg_w);
                    for (acc, x) in gw_g.iter_mut().zip(fwd.g.row(k)) {
                        *acc += d * x;
                    }
                    for (acc, x) in gw_p.iter_mut().zip(fwd.p.row(k)) {
                        *acc += d * x;
                    }
                    for (o, w) in dg.row_mut(k).iter_mut().zip(wg) {
                        *o = d * w;
                    }
                    for (o, w) in dp.row_mut(k).iter_mut().zip(wp) {
                        *o = d * w;
                    }
                }
            }
            FusionMode::Kronecker => {
                let stride = dp_w + 1;
                for k in 0..n {
                    let d = dtheta[k];
                    let g = fwd.g.row(k);
                    let p = fwd.p.row(k);
                    let feats = kronecker_fusion(g, p);
                    for (acc, f) in self.head.grad_weight.iter_mut().zip(&feats) {
                        *acc += d * f;
                    }
                    let w = &self.head.weight;
                    for i in 0..dg_w {
                        let row = &w[i * stride..(i + 1) * stride];
                        dg.row_mut(k)[i] = d * (dot(&row[..dp_w], p) + row[dp_w]);
                    }
                    for j in 0..dp_w {
                        let mut s = w[dg_w * stride + j];
                        for i in 0..dg_w {
                            s += w[i * stride + j] * g[i];
                        }
                        dp.row_mut(k)[j] = d * s;
                    }
                }
            }
        }
        let dh = self.mlp_b.backward(&dg)?;
        let (dg1, _frozen) = dh.split_cols(self.snn.out_dim())?;
        self.snn.backward(&dg1)?;
        self.image_encoder.backward(&dp)?;
        Ok(())
    }

    /// Parameter groups in update order: genomic (SNN + MLP-B), image, head.
    pub fn param_groups(&mut self) -> [ParamGroup<'_>; 3] {
        let mut genomic = self.snn.tensors_mut();
        genomic.extend(self.mlp_b.tensors_mut());
        [
            ParamGroup::new("genomic", genomic),
            ParamGroup::new("image", self.image_encoder.tensors_mut()),
            ParamGroup::new("head", self.head.tensors_mut()),
        ]
    }

    /// Flat copy of every trainable parameter, laid out as genomic, image, head.
    pub fn trainable_parameters(&self) -> Vec<f64> {
        let mut out = self.snn.parameters();
        out.extend(self.mlp_b.parameters());
        out.extend(self.image_encoder.parameters());
        out.extend(&self.head.weight);
        out.extend(self.head.bias);
        out
    }

    /// Gradient buffers aligned with [`FusionModel::trainable_parameters`].
    pub fn trainable_gradients(&self) -> Vec<f64> {
        let mut out = self.snn.gradients();
        out.extend(self.mlp_b.gradients());
        out.extend(self.image_encoder.gradients());
        out.extend(&self.head.grad_weight);
        out.extend(self.head.grad_bias);
        out
    }

    pub fn set_trainable_parameters(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.trainable_parameters().len();
        if flat.len() != total {
            return Err(Error::shape("trainable parameters", total, flat.len()));
        }
        let mut off = 0;
        for mlp in [&mut self.snn, &mut self.mlp_b, &mut self.image_encoder] {
            let n = mlp.parameters().len();
            mlp.set_parameters(&flat[off..off + n])?;
            off += n;
        }
        let hw = self.head.weight.len();
        self.head.weight.copy_from_slice(&flat[off..off + hw]);
        self.head.bias = [flat[off + hw]];
        Ok(())
    }

    /// Sizes of the genomic, image and head blocks in the flat layout.
    pub fn group_sizes(&self) -> [usize; 3] {
        [
            self.snn.parameters().len() + self.mlp_b.parameters().len(),
            self.image_encoder.parameters().len(),
            self.head.weight.len() + 1,
        ]
    }

    /// Bit patterns of the frozen encoder and MLP-A parameters.
    pub fn frozen_fingerprint(&self) -> Vec<u64> {
        let mut fp = self.encoder.fingerprint();
        fp.extend(self.mlp_a.parameters().iter().map(|v| v.to_bits()));
        fp
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.set_meta("fusion_mode", self.mode.name())?;
        for (name, mlp) in [
            ("snn", &self.snn),
            ("mlp_b", &self.mlp_b),
            ("image_encoder", &self.image_encoder),
            ("mlp_a", &self.mlp_a),
        ] {
            let names = ck.put_mlp(name, mlp)?;
            ck.set_group(name, names)?;
        }
        ck.insert("head.weight", Matrix::row_vector(&self.head.weight)?)?;
        ck.insert("head.bias", Matrix::row_vector(&self.head.bias)?)?;
        ck.set_group("head", vec!["head.weight".into(), "head.bias".into()])?;
        self.encoder.put(&mut ck, "encoder")?;
        ck.set_group("encoder", vec!["encoder.weight".into(), "encoder.bias".into()])?;
        if let Some((mean, scale)) = &self.rna_norm {
            ck.insert("rna_norm.mean", Matrix::row_vector(mean)?)?;
            ck.insert("rna_norm.scale", Matrix::row_vector(scale)?)?;
            ck.set_group("rna_norm", vec!["rna_norm.mean".into(), "rna_norm.scale".into()])?;
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mode = match ck.meta("fusion_mode") {
            Some("concat") => FusionMode::Concat,
            Some("kronecker") => FusionMode::Kronecker,
            other => return Err(Error::invalid("fusion_mode", format!("{other:?}"))),
        };
        let head_w = ck
            .tensor("head.weight")
            .ok_or_else(|| Error::invalid("checkpoint", "missing head.weight"))?;
        let head_b = ck
            .tensor("head.bias")
            .ok_or_else(|| Error::invalid("checkpoint", "missing head.bias"))?;
        let model = Self {
            snn: ck.get_mlp("snn")?,
            encoder: FrozenEncoder::get(ck, "encoder")?,
            mlp_a: ck.get_mlp("mlp_a")?,
            mlp_b: ck.get_mlp("mlp_b")?,
            image_encoder: ck.get_mlp("image_encoder")?,
            head: Head {
                weight: head_w.as_slice().to_vec(),
                bias: [head_b.as_slice()[0]],
                grad_weight: vec![0.0; head_w.as_slice().len()],
                grad_bias: [0.0],
            },
            mode,
            rna_norm: match (ck.tensor("rna_norm.mean"), ck.tensor("rna_norm.scale")) {
                (Some(m), Some(s)) if m.cols() == s.cols() => Some((m.as_slice().to_vec(), s.as_slice().to_vec())),
                (None, None) => None,
                _ => return Err(Error::invalid("checkpoint", "incomplete rna_norm group")),
            },
        };
        if let Some((m, _)) = &model.rna_norm {
            if m.len() != model.mlp_a.out_dim() {
                return Err(Error::shape("rna_norm", model.mlp_a.out_dim(), m.len()));
            }
        }
        let expected = match mode {
            FusionMode::Concat => model.genomic_dim() + model.image_dim(),
            FusionMode::Kronecker => (model.genomic_dim() + 1) * (model.image_dim() + 1),
        };
        if model.head.weight.len() != expected {
            return Err(Error::shape("head.weight", expected, model.head.weight.len()));
        }
        Ok(model)
    }
}

/// Record features gathered into matrices, with the frozen RNA path applied once.
#[derive(Debug, Clone)]
pub struct PreparedCohort {
    pub inputs: BatchInputs,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
}

impl PreparedCohort {
    pub fn new(model: &FusionModel, records: &[SurvivalRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("records", "empty"));
        }
        let rows = |f: fn(&SurvivalRecord) -> &Vec<f64>| {
            Matrix::from_rows(&records.iter().map(|r| f(r).as_slice()).collect::<Vec<_>>())
        };
        let cnv_mut = rows(|r| &r.cnv_mut)?;
        let rna = rows(|r| &r.rna)?;
        let image = rows(|r| &r.image)?;
        Ok(Self {
            inputs: BatchInputs {
                cnv_mut,
                rna_features: model.rna_features(&rna)?,
                image,
            },
            times: records.iter().map(|r| r.time).collect(),
            events: records.iter().map(|r| r.event).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> BatchInputs {
        BatchInputs {
            cnv_mut: self.inputs.cnv_mut.select_rows(idx),
            rna_features: self.inputs.rna_features.select_rows(idx),
            image: self.inputs.image.select_rows(idx),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub eta: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Halve the learning rate after each third of training.
    pub step_decay: bool,
    pub modulation: ModulationConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            eta: 0.01,
            batch_size: 32,
            momentum: 0.0,
            step_decay: true,
            modulation: ModulationConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("train.eta", format!("{} must be positive", self.eta)));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("train.batch_size", format!("{} must be at least 2", self.batch_size)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("train.momentum", format!("{} not in [0, 1)", self.momentum)));
        }
        self.modulation.validate()
    }

    pub fn eta_at(&self, epoch: usize) -> f64 {
        if !self.step_decay || self.epochs == 0 {
            return self.eta;
        }
        let phase = (3 * epoch / self.epochs).min(2);
        self.eta * 0.5f64.powi(phase as i32)
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean Cox loss over the non-degenerate batches.
    pub loss: f64,
    /// C-index of the scores produced during the epoch's forward passes.
    pub c_index: Option<f64>,
    /// Mean pre-clamp `ρ^G` over the epoch's steps (concat mode only).
    pub rho_g: Option<f64>,
    pub factor_g: Option<f64>,
    pub factor_p: Option<f64>,
    pub skipped_batches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochMetrics>,
    /// Every step's report, in order (concat mode only).
    pub reports: Vec<ContributionReport>,
    pub skipped_batches: usize,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn rho_trace(&self) -> Vec<f64> {
        self.reports.iter().filter(|r| !r.degenerate).map(|r| r.rho_g_raw).collect()
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Trains the branch networks and head on `data` with minibatch SGD on the
/// Cox loss. In concat mode every step also computes a contribution report;
/// it changes the branch step sizes only when modulation is enabled.
pub fn train_survival(model: &mut FusionModel, data: &PreparedCohort, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.modulation.enabled && model.mode != FusionMode::Concat {
        return Err(Error::Config(
            "gradient modulation requires the concat fusion head".into(),
        ));
    }
    if data.is_empty() {
        return Err(Error::invalid("training data", "empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.momentum)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut outcome = TrainOutcome {
        epochs: Vec::with_capacity(cfg.epochs),
        reports: Vec::new(),
        skipped_batches: 0,
        steps: 0,
    };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let eta = cfg.eta_at(epoch);
        let mut losses = Vec::new();
        let mut rhos = Vec::new();
        let mut fgs = Vec::new();
        let mut fps = Vec::new();
        let mut skipped = 0;
        let mut seen_theta = Vec::with_capacity(data.len());
        let mut seen_idx = Vec::with_capacity(data.len());

        for chunk in order.chunks(cfg.batch_size) {
            let times: Vec<f64> = chunk.iter().map(|&i| data.times[i]).collect();
            let events: Vec<bool> = chunk.iter().map(|&i| data.events[i]).collect();
            let batch = CoxBatch::from_times(&times, &events)?;
            if batch.is_degenerate() {
                skipped += 1;
                continue;
            }
            let fwd = model.forward(&data.select(chunk))?;
            let loss = cox_loss(&fwd.theta, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "cox loss at epoch {epoch}, step {}",
                    outcome.steps
                )));
            }
            let dtheta = cox_gradient(&fwd.theta, &batch)?;
            model.backward(&fwd, &dtheta)?;

            let report = if model.mode == FusionMode::Concat {
                let (wg, wp, b) = model.head_blocks()?;
                let (sg, sp) = branch_scores(wg, &fwd.g, wp, &fwd.p, b)?;
                Some(contribution_ratio(&sg, &sp, &batch, &cfg.modulation)?)
            } else {
                None
            };
            let [mut genomic, mut image, head] = model.param_groups();
            if let Some(r) = &report {
                let active = cfg.modulation.enabled && outcome.steps >= cfg.modulation.warmup_steps;
                let effective = if active { cfg.modulation.clone() } else { ModulationConfig::disabled() };
                apply_modulation(r, &effective, &mut genomic, &mut image)?;
            }
            let mut groups = [genomic, image, head];
            opt.step(&mut groups, eta)?;

            if let Some(r) = report {
                if !r.degenerate {
                    rhos.push(r.rho_g_raw);
                    fgs.push(r.factor_g);
                    fps.push(r.factor_p);
                }
                outcome.reports.push(r);
            }
            losses.push(loss);
            seen_theta.extend_from_slice(&fwd.theta);
            seen_idx.extend_from_slice(chunk);
            outcome.steps += 1;
        }

        let c_index = if seen_idx.is_empty() {
            None
        } else {
            let t: Vec<f64> = seen_idx.iter().map(|&i| data.times[i]).collect();
            let e: Vec<bool> = seen_idx.iter().map(|&i| data.events[i]).collect();
            concordance_index(&seen_theta, &t, &e).ok()
        };
        outcome.skipped_batches += skipped;
        outcome.epochs.push(EpochMetrics {
            epoch,
            loss: mean(&losses).unwrap_or(0.0),
            c_index,
            rho_g: mean(&rhos),
            factor_g: mean(&fgs),
            factor_p: mean(&fps),
            skipped_batches: skipped,
        });
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub c_index: f64,
    /// Cox loss over the whole set divided by its number of events.
    pub mean_loss: f64,
}

/// C-index and per-event Cox loss over one risk-set structure spanning `data`.
pub fn evaluate(model: &FusionModel, data: &PreparedCohort) -> Result<EvalMetrics> {
    let fwd = model.predict_batch(&data.inputs)?;
    let c_index = concordance_index(&fwd.theta, &data.times, &data.events)?;
    let batch = CoxBatch::from_times(&data.times, &data.events)?;
    let n_events = data.events.iter().filter(|&&e| e).count().max(1);
    Ok(EvalMetrics {
        c_index,
        mean_loss: cox_loss(&fwd.theta, &batch)? / n_events as f64,
    })
}

/// Worst-case agreement between analytic and numerical gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub checked: usize,
    /// Coordinates where the loss has a kink (a ReLU crossing zero) within
    /// the step; central differences say nothing there.
    pub kinks: usize,
    pub max_rel_error: f64,
}

const KINK_SLOPE: f64 = 1e-2;
/// Below this, gradients are compared absolutely.
const GRAD_FLOOR: f64 = 1e-4;

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares every trainable parameter gradient of the Cox loss on `x` against
/// central differences with step `h`. Leaves the parameters unchanged.
///
/// A coordinate is a kink when its forward and backward one-sided slopes
/// disagree by more than `KINK_SLOPE`.
pub fn gradient_check(model: &mut FusionModel, x: &BatchInputs, batch: &CoxBatch, h: f64) -> Result<GradCheck> {
    let fwd = model.forward(x)?;
    model.backward(&fwd, &cox_gradient(&fwd.theta, batch)?)?;
    let analytic = model.trainable_gradients();
    let base = model.trainable_parameters();
    let mut params = base.clone();
    let mut worst: f64 = 0.0;
    let mut kinks = 0;
    let centre = cox_loss(&model.predict_batch(x)?.theta, batch)?;
    for i in 0..params.len() {
        let mut loss_at = |v: f64, params: &mut Vec<f64>| -> Result<f64> {
            params[i] = v;
            model.set_trainable_parameters(params)?;
            cox_loss(&model.predict_batch(x)?.theta, batch)
        };
        let up = loss_at(base[i] + h, &mut params)?;
        let down = loss_at(base[i] - h, &mut params)?;
        params[i] = base[i];
        if ((up - centre) - (centre - down)).abs() / h > KINK_SLOPE {
            kinks += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric, GRAD_FLOOR));
    }
    model.set_trainable_parameters(&base)?;
    Ok(GradCheck {
        checked: base.len() - kinks,
        kinks,
        max_rel_error: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smoothing::{default_encoder, init_mlp_a, Stage1Config};

    fn tiny(mode: FusionMode) -> FusionModel {
        let arch = Architecture {
            snn_hidden: 3,
            snn_out: 2,
            hidden_dim: 4,
            genomic_dim: 2,
            image_hidden: 3,
            image_dim: 2,
            fusion_mode: mode,
        };
        let enc = default_encoder(4, 3, 1).unwrap();
        let mlp_a = init_mlp_a(
            3,
            &Stage1Config {
                hidden_dim: 4,
                feature_dim: 2,
                ..Default::default()
            },
        )
        .unwrap();
        FusionModel::new(&arch, 3, 2, enc, mlp_a, 9).unwrap()
    }

    #[test]
    fn kronecker_examples() {
        assert_eq!(kronecker_fusion(&[0.0], &[0.0]), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(kronecker_fusion(&[2.0], &[3.0]), vec![6.0, 2.0, 3.0, 1.0]);
        assert_eq!(kronecker_fusion(&[1.0, 2.0, 3.0], &[4.0, 5.0]).len(), 12);
    }

    #[test]
    fn fused_hazard_examples() {
        let mut m = tiny(FusionMode::Concat);
        m.set_head(&[0.0; 4], 0.7).unwrap();
        assert_eq!(m.fused_hazard(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 0.7);

        m.set_head(&[2.0, 3.0, -1.0, 0.0], 0.0).unwrap();
        assert_eq!(m.fused_hazard(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn fused_hazard_needs_concat() {
        let m = tiny(FusionMode::Kronecker);
        assert!(matches!(m.fused_hazard(&[0.0; 2], &[0.0; 2]), Err(Error::State(_))));
    }

    #[test]
    fn zero_mlp_b_gives_zero_genomic_feature() {
        let mut m = tiny(FusionMode::Concat);
        let n = m.mlp_b.parameters().len();
        m.mlp_b.set_parameters(&vec![0.0; n]).unwrap();
        let g = m
            .genomic_branch(&GenomicInput {
                cnv_mut: vec![1.0, -2.0, 0.5],
                rna: vec![1.0, 2.0, 0.0, 3.0],
            })
            .unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = tiny(FusionMode::Kronecker);
        let ck = m.to_checkpoint().unwrap();
        let text = ck.to_text();
        let back = FusionModel::from_checkpoint(&Checkpoint::from_text(&text, std::path::Path::new("m")).unwrap())
            .unwrap();
        assert_eq!(back.trainable_parameters(), m.trainable_parameters());
        assert_eq!(back.frozen_fingerprint(), m.frozen_fingerprint());
        for g in ["snn", "mlp_b", "image_encoder", "head"] {
            assert!(ck.group(g).is_some(), "{g}");
        }
    }

    #[test]
    fn modulation_with_kronecker_is_rejected() {
        let mut m = tiny(FusionMode::Kronecker);
        let recs = vec![
            SurvivalRecord {
                id: "a".into(),
                time: 1.0,
                event: true,
                cnv_mut: vec![0.0; 3],
                rna: vec![1.0; 4],
                image: vec![0.0; 2],
            };
            2
        ];
        let data = PreparedCohort::new(&m, &recs).unwrap();
        let err = train_survival(&mut m, &data, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn decay_schedule() {
        let cfg = TrainConfig {
            epochs: 9,
            eta: 0.08,
            ..Default::default()
        };
        let etas: Vec<f64> = (0..9).map(|e| cfg.eta_at(e)).collect();
        assert_eq!(etas, vec![0.08, 0.08, 0.08, 0.04, 0.04, 0.04, 0.02, 0.02, 0.02]);
    }

    fn tiny_batch(seed: u64) -> (BatchInputs, CoxBatch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = |r: usize, c: usize, rng: &mut ChaCha8Rng| Matrix::random_uniform(r, c, 1.0, rng);
        let x = BatchInputs {
            cnv_mut: m(6, 3, &mut rng),
            rna_features: m(6, 2, &mut rng),
            image: m(6, 2, &mut rng),
        };
        let batch = CoxBatch::from_times(
            &[3.0, 1.0, 4.0, 1.5, 5.0, 2.0],
            &[true, true, false, true, false, true],
        )
        .unwrap();
        (x, batch)
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        for mode in [FusionMode::Concat, FusionMode::Kronecker] {
            let mut m = tiny(mode);
            let (x, batch) = tiny_batch(3);
            let before = m.trainable_parameters();
            let gc = gradient_check(&mut m, &x, &batch, 1e-5).unwrap();
            assert!(gc.max_rel_error < 1e-4, "{mode:?}: {}", gc.max_rel_error);
            assert_eq!(m.trainable_parameters(), before);
        }
    }
}
