//! Stage 1, cross-validated stage 2 and the ablation grid, shared by the
//! subcommands and the test suites.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::cohort::{split_folds, FoldPlan};
use crate::error::{Error, Result};
use crate::fusion::{evaluate, train_survival, EpochMetrics, FusionMode, FusionModel, PreparedCohort};
use crate::modulation::ContributionReport;
use crate::numnet::{Matrix, Mlp};
use crate::smoothing::{
    default_encoder, init_mlp_a, interpolation_gap, pretrain_mlp_a, sample_pairs, CellProfile, FrozenEncoder,
    Stage1Outcome,
};
use crate::survival::{concordance_index, LinearCox, LinearCoxConfig, SurvivalRecord};

pub const GAP_LAMBDAS: [f64; 3] = [0.25, 0.5, 0.75];

/// Mixes a run seed with a tag so fold-level streams never collide.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The frozen stand-in for the pretrained single-cell encoder.
pub fn frozen_encoder(cfg: &RunConfig) -> Result<FrozenEncoder> {
    default_encoder(cfg.cohort.dim_rna, cfg.smoothing.embed_dim, cfg.seed)
}

/// MLP-A as used when smoothing is off: the stage-1 initialisation, untrained.
pub fn untrained_mlp_a(cfg: &RunConfig, encoder: &FrozenEncoder) -> Result<Mlp> {
    init_mlp_a(encoder.embed_dim(), &cfg.stage1())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub n_cells: usize,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub epoch_losses: Vec<f64>,
    pub gap_before: f64,
    pub gap_after: f64,
}

pub fn pretrain(cfg: &RunConfig, cells: &[CellProfile]) -> Result<(FrozenEncoder, Stage1Outcome, Stage1Report)> {
    let encoder = frozen_encoder(cfg)?;
    let stage1 = cfg.stage1();
    let pairs = sample_pairs(cells, cfg.smoothing.gap_pairs, derive_seed(cfg.seed, 0x6A9));
    let gap_before = interpolation_gap(&encoder, &init_mlp_a(encoder.embed_dim(), &stage1)?, &pairs, &GAP_LAMBDAS)?;
    let outcome = pretrain_mlp_a(cells, &encoder, &stage1)?;
    let gap_after = interpolation_gap(&encoder, &outcome.mlp_a, &pairs, &GAP_LAMBDAS)?;
    let report = Stage1Report {
        n_cells: cells.len(),
        epochs: stage1.epochs,
        final_loss: outcome.epoch_losses.last().copied(),
        epoch_losses: outcome.epoch_losses.clone(),
        gap_before,
        gap_after,
    };
    Ok((encoder, outcome, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub c_index: f64,
    pub mean_loss: f64,
    /// Linear Cox fit on the trained image features, scored on the test fold.
    pub image_probe_c_index: Option<f64>,
    pub train_c_index: Option<f64>,
    pub steps: usize,
    pub skipped_batches: usize,
}

#[derive(Debug, Clone)]
pub struct FoldRun {
    pub result: FoldResult,
    pub epochs: Vec<EpochMetrics>,
    pub reports: Vec<ContributionReport>,
    pub model: FusionModel,
}

#[derive(Debug, Clone)]
pub struct CvRun {
    pub plan: FoldPlan,
    pub folds: Vec<FoldRun>,
}

fn subset(records: &[SurvivalRecord], idx: &[usize]) -> Vec<SurvivalRecord> {
    idx.iter().map(|&i| records[i].clone()).collect()
}

fn image_probe(model: &FusionModel, train: &PreparedCohort, test: &PreparedCohort) -> Result<Option<f64>> {
    let p_train = model.predict_batch(&train.inputs)?.p;
    let p_test = model.predict_batch(&test.inputs)?.p;
    let Ok(fit) = LinearCox::fit(&p_train, &train.times, &train.events, LinearCoxConfig::default()) else {
        return Ok(None);
    };
    Ok(concordance_index(&fit.predict(&p_test)?, &test.times, &test.events).ok())
}

pub fn run_fold(
    cfg: &RunConfig,
    records: &[SurvivalRecord],
    plan: &FoldPlan,
    fold: usize,
    encoder: &FrozenEncoder,
    mlp_a: &Mlp,
) -> Result<FoldRun> {
    let train = subset(records, &plan.train_indices(records, fold));
    let test = subset(records, &plan.test_indices(records, fold));
    let first = &records[0];
    let mut model = FusionModel::new(
        &cfg.architecture(),
        first.cnv_mut.len(),
        first.image.len(),
        encoder.clone(),
        mlp_a.clone(),
        derive_seed(cfg.seed, 2 * fold as u64 + 1),
    )?;
    let rna = Matrix::from_rows(&train.iter().map(|r| r.rna.as_slice()).collect::<Vec<_>>())?;
    model.calibrate_rna(&rna)?;
    let train_data = PreparedCohort::new(&model, &train)?;
    let test_data = PreparedCohort::new(&model, &test)?;
    let mut tcfg = cfg.train();
    tcfg.seed = derive_seed(cfg.seed, 2 * fold as u64 + 2);
    let outcome = train_survival(&mut model, &train_data, &tcfg)?;
    let eval = evaluate(&model, &test_data).map_err(|e| match e {
        Error::Undefined(msg) => Error::Undefined(format!("fold {fold}: {msg}")),
        other => other,
    })?;
    Ok(FoldRun {
        result: FoldResult {
            fold,
            n_train: train.len(),
            n_test: test.len(),
            c_index: eval.c_index,
            mean_loss: eval.mean_loss,
            image_probe_c_index: image_probe(&model, &train_data, &test_data)?,
            train_c_index: outcome.epochs.last().and_then(|e| e.c_index),
            steps: outcome.steps,
            skipped_batches: outcome.skipped_batches,
        },
        epochs: outcome.epochs,
        reports: outcome.reports,
        model,
    })
}

/// Trains and evaluates one model per fold, up to `jobs` folds at a time.
/// Results come back in fold order regardless of `jobs`.
pub fn cross_validate(
    cfg: &RunConfig,
    records: &[SurvivalRecord],
    encoder: &FrozenEncoder,
    mlp_a: &Mlp,
    jobs: usize,
) -> Result<CvRun> {
    cfg.validate()?;
    let plan = split_folds(records, cfg.k_folds, cfg.seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let folds = pool.install(|| {
        (0..cfg.k_folds)
            .into_par_iter()
            .map(|f| run_fold(cfg, records, &plan, f, encoder, mlp_a))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(CvRun { plan, folds })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (n − 1).
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            std: var.sqrt(),
            n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub c_index: Summary,
    pub image_probe_c_index: Option<Summary>,
    pub skipped_batches: usize,
}

impl Aggregate {
    pub fn of(folds: &[FoldResult]) -> Self {
        let c: Vec<f64> = folds.iter().map(|f| f.c_index).collect();
        let probes: Option<Vec<f64>> = folds.iter().map(|f| f.image_probe_c_index).collect();
        Self {
            c_index: Summary::of(&c),
            image_probe_c_index: probes.map(|p| Summary::of(&p)),
            skipped_batches: folds.iter().map(|f| f.skipped_batches).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    pub unix_seconds: u64,
}

impl Generated {
    pub fn now() -> Self {
        let unix_seconds = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Self { unix_seconds }
    }
}

pub fn tool_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

/// Everything written to `report.json`. Only `generated` varies between
/// identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool: String,
    pub config: RunConfig,
    pub folds: Vec<FoldResult>,
    pub aggregate: Aggregate,
    pub generated: Generated,
}

impl RunReport {
    pub fn new(cfg: &RunConfig, run: &CvRun) -> Self {
        let folds: Vec<FoldResult> = run.folds.iter().map(|f| f.result.clone()).collect();
        Self {
            tool: tool_version(),
            config: cfg.clone(),
            aggregate: Aggregate::of(&folds),
            folds,
            generated: Generated::now(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct EpochLine<'a> {
    kind: &'static str,
    fold: usize,
    #[serde(flatten)]
    metrics: &'a EpochMetrics,
}

#[derive(Debug, Clone, Serialize)]
struct StepLine {
    kind: &'static str,
    fold: usize,
    step: usize,
    rho_g_raw: f64,
    rho_g: f64,
    rho_p: f64,
    factor_g: f64,
    factor_p: f64,
    degenerate: bool,
}

/// Metrics stream: per fold, one `epoch` object per epoch followed by one
/// `step` object per contribution report.
pub fn metrics_jsonl(run: &CvRun) -> Result<String> {
    let mut out = String::new();
    for f in &run.folds {
        for m in &f.epochs {
            out.push_str(&serde_json::to_string(&EpochLine {
                kind: "epoch",
                fold: f.result.fold,
                metrics: m,
            })?);
            out.push('\n');
        }
        for (step, r) in f.reports.iter().enumerate() {
            out.push_str(&serde_json::to_string(&StepLine {
                kind: "step",
                fold: f.result.fold,
                step,
                rho_g_raw: r.rho_g_raw,
                rho_g: r.rho_g,
                rho_p: r.rho_p,
                factor_g: r.factor_g,
                factor_p: r.factor_p,
                degenerate: r.degenerate,
            })?);
            out.push('\n');
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Concat,
    Kronecker,
    Modulation,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Concat => "concat",
            Variant::Kronecker => "kronecker",
            Variant::Modulation => "modulation",
        }
    }
}

/// Grid order: smoothing off then on; within each, concat, kronecker, modulation.
pub const ABLATION_GRID: [(bool, Variant); 6] = [
    (false, Variant::Concat),
    (false, Variant::Kronecker),
    (false, Variant::Modulation),
    (true, Variant::Concat),
    (true, Variant::Kronecker),
    (true, Variant::Modulation),
];

/// The configuration `train` needs to reproduce one grid cell.
pub fn variant_config(base: &RunConfig, smoothing: bool, variant: Variant) -> RunConfig {
    let mut cfg = base.clone();
    cfg.smoothing.enabled = smoothing;
    cfg.fusion_mode = match variant {
        Variant::Kronecker => FusionMode::Kronecker,
        _ => FusionMode::Concat,
    };
    cfg.modulation.enabled = variant == Variant::Modulation;
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: usize,
    pub smoothing: bool,
    pub fusion: Variant,
    pub c_index_mean: f64,
    pub c_index_std: f64,
    pub fold_c_index: Vec<f64>,
}

/// Runs every grid cell. `smoothed` is the stage-1 MLP-A for the rows with
/// smoothing on; rows with smoothing off use the untrained MLP-A.
pub fn ablate(
    base: &RunConfig,
    records: &[SurvivalRecord],
    encoder: &FrozenEncoder,
    smoothed: &Mlp,
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    let raw = untrained_mlp_a(base, encoder)?;
    ABLATION_GRID
        .iter()
        .enumerate()
        .map(|(i, &(smoothing, variant))| {
            let cfg = variant_config(base, smoothing, variant);
            let mlp_a = if smoothing { smoothed } else { &raw };
            let run = cross_validate(&cfg, records, encoder, mlp_a, jobs)?;
            let c: Vec<f64> = run.folds.iter().map(|f| f.result.c_index).collect();
            let s = Summary::of(&c);
            Ok(AblationRow {
                row: i + 1,
                smoothing,
                fusion: variant,
                c_index_mean: s.mean,
                c_index_std: s.std,
                fold_c_index: c,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(["row", "smoothing", "fusion", "c_index_mean", "c_index_std"])?;
    for r in rows {
        w.write_record([
            r.row.to_string(),
            if r.smoothing { "on" } else { "off" }.to_string(),
            r.fusion.name().to_string(),
            format!("{:.6}", r.c_index_mean),
            format!("{:.6}", r.c_index_std),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("ascii csv"))
}
