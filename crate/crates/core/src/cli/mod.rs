//! The `survfuse` command line.

pub mod config;
pub mod gradcheck;
pub mod pipeline;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::cohort::{generate_cohort, load_cohort, write_cohort};
use crate::error::{Error, Result};
use crate::fusion::{evaluate, FusionMode, FusionModel, PreparedCohort};
use crate::numnet::Checkpoint;
use crate::smoothing::{generate_cells, load_cells_csv, write_cells_csv, FrozenEncoder};
use config::RunConfig;
use pipeline::{ablate, ablation_csv, cross_validate, frozen_encoder, metrics_jsonl, pretrain, untrained_mlp_a, RunReport};

#[derive(Debug, Parser)]
#[command(name = "survfuse", version, about = "Multimodal Cox survival training with gradient modulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Folds trained in parallel.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Args, Clone, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    /// Stage-1 checkpoint (encoder and MLP-A).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub k_folds: Option<usize>,
    #[arg(long, value_enum)]
    pub modulation: Option<Switch>,
    #[arg(long, value_enum)]
    pub smoothing: Option<Switch>,
    #[arg(long, value_enum)]
    pub fusion: Option<FusionArg>,
    /// Also write one model checkpoint per fold.
    #[arg(long)]
    pub save_models: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FusionArg {
    Concat,
    Kronecker,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic cohort CSV.
    GenCohort {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_patients: Option<usize>,
    },
    /// Write a synthetic single-cell corpus CSV.
    GenCells {
        #[command(flatten)]
        common: Common,
    },
    /// Stage 1: mixup pretraining of MLP-A on the cell corpus.
    PretrainSmooth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cells: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Stage 2: k-fold survival training and evaluation.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Score a saved model on a cohort.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cohort: Option<PathBuf>,
    },
    /// Smoothing {off, on} x fusion {concat, kronecker, modulation}.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: TrainArgs,
        #[arg(long)]
        cells: Option<PathBuf>,
    },
    /// Finite-difference gradient checks; exits nonzero on a breach.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

/// Files written by one command. Everything goes to `<name>.partial` first
/// and is renamed only once the whole command has succeeded.
struct Outputs {
    dir: PathBuf,
    force: bool,
    staged: Vec<(PathBuf, PathBuf)>,
}

impl Outputs {
    fn new(dir: PathBuf, force: bool) -> Self {
        Self {
            dir,
            force,
            staged: Vec::new(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Refuses up front when any final path exists and `--force` is absent.
    fn claim(&self, names: &[&str]) -> Result<()> {
        if self.force {
            return Ok(());
        }
        for n in names {
            let p = self.path(n);
            if p.exists() {
                return Err(Error::Config(format!(
                    "{} already exists (use --force to overwrite)",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    fn stage_path(&mut self, name: &str) -> Result<PathBuf> {
        let target = self.path(name);
        if let Some(parent) = target.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut partial = target.clone().into_os_string();
        partial.push(".partial");
        let partial = PathBuf::from(partial);
        self.staged.push((partial.clone(), target));
        Ok(partial)
    }

    fn stage_text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.stage_path(name)?;
        std::fs::write(p, text)?;
        Ok(())
    }

    fn stage_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.stage_text(name, &text)
    }

    fn commit(self) -> Result<Vec<PathBuf>> {
        let mut done = Vec::new();
        for (partial, target) in self.staged {
            std::fs::rename(&partial, &target)?;
            done.push(target);
        }
        Ok(done)
    }
}

fn effective_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.paths.out_dir = Some(o.clone());
    }
    Ok(cfg)
}

fn apply_train_args(cfg: &mut RunConfig, a: &TrainArgs) {
    if let Some(p) = &a.cohort {
        cfg.paths.cohort = Some(p.clone());
    }
    if let Some(p) = &a.checkpoint {
        cfg.paths.checkpoint = Some(p.clone());
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(e) = a.eta {
        cfg.eta = e;
    }
    if let Some(k) = a.k_folds {
        cfg.k_folds = k;
    }
    if let Some(m) = a.modulation {
        cfg.modulation.enabled = m.on();
    }
    if let Some(s) = a.smoothing {
        cfg.smoothing.enabled = s.on();
    }
    if let Some(f) = a.fusion {
        cfg.fusion_mode = match f {
            FusionArg::Concat => FusionMode::Concat,
            FusionArg::Kronecker => FusionMode::Kronecker,
        };
    }
}

fn finish(mut cfg: RunConfig) -> Result<RunConfig> {
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str, flag: &str, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("no {what}: pass {flag} or set paths.{key}")))
}

/// Encoder and MLP-A for stage 2: from the stage-1 checkpoint when smoothing
/// is on, otherwise the untrained MLP-A (and the checkpoint's encoder if given).
fn stage1_parts(cfg: &RunConfig) -> Result<(FrozenEncoder, crate::numnet::Mlp)> {
    if cfg.smoothing.enabled {
        let path = required(&cfg.paths.checkpoint, "stage-1 checkpoint", "--checkpoint", "checkpoint")?;
        let ck = Checkpoint::read(path)?;
        return Ok((FrozenEncoder::get(&ck, "encoder")?, ck.get_mlp("mlp_a")?));
    }
    let encoder = match &cfg.paths.checkpoint {
        Some(p) => FrozenEncoder::load(p)?,
        None => frozen_encoder(cfg)?,
    };
    let mlp_a = untrained_mlp_a(cfg, &encoder)?;
    Ok((encoder, mlp_a))
}

fn echo(cfg: &RunConfig) {
    eprintln!("# effective config\n{}", cfg.to_toml());
}

fn cmd_gen_cohort(common: &Common, n_patients: Option<usize>) -> Result<()> {
    let mut cfg = effective_config(common)?;
    if let Some(n) = n_patients {
        cfg.cohort.n_patients = n;
    }
    let cfg = finish(cfg)?;
    let mut out = Outputs::new(out_dir(&cfg), common.force);
    out.claim(&["cohort.csv"])?;
    let records = generate_cohort(&cfg.cohort)?;
    let path = out.stage_path("cohort.csv")?;
    write_cohort(&path, &records)?;
    out.commit()?;
    let events = records.iter().filter(|r| r.event).count();
    println!(
        "wrote {} patients ({} events, censored fraction {:.3}) to {}",
        records.len(),
        events,
        1.0 - events as f64 / records.len() as f64,
        out_dir(&cfg).join("cohort.csv").display()
    );
    Ok(())
}

fn cmd_gen_cells(common: &Common) -> Result<()> {
    let cfg = finish(effective_config(common)?)?;
    let mut out = Outputs::new(out_dir(&cfg), common.force);
    out.claim(&["cells.csv"])?;
    let cells = generate_cells(&cfg.cells)?;
    let path = out.stage_path("cells.csv")?;
    write_cells_csv(&path, &cells)?;
    out.commit()?;
    println!(
        "wrote {} cells ({} types, {} genes) to {}",
        cells.len(),
        cfg.cells.num_types,
        cfg.cells.gene_dim,
        out_dir(&cfg).join("cells.csv").display()
    );
    Ok(())
}

fn cmd_pretrain(common: &Common, cells: Option<&PathBuf>, epochs: Option<usize>) -> Result<()> {
    let mut cfg = effective_config(common)?;
    if let Some(c) = cells {
        cfg.paths.cells = Some(c.clone());
    }
    if let Some(e) = epochs {
        cfg.smoothing.stage1_epochs = e;
    }
    let cfg = finish(cfg)?;
    let mut out = Outputs::new(out_dir(&cfg), common.force);
    out.claim(&["stage1.ckpt", "stage1_report.json"])?;
    let path = required(&cfg.paths.cells, "cell corpus", "--cells", "cells")?;
    let cells = load_cells_csv(path, cfg.num_cell_types)?;
    let (encoder, outcome, report) = pretrain(&cfg, &cells)?;
    let ck = outcome.to_checkpoint(&encoder)?;
    let ckp = out.stage_path("stage1.ckpt")?;
    ck.write(&ckp)?;
    out.stage_json("stage1_report.json", &report)?;
    out.commit()?;
    println!(
        "stage 1: {} cells, final loss {}, interpolation gap {:.4} -> {:.4}",
        report.n_cells,
        report.final_loss.map_or("n/a".into(), |l| format!("{l:.5}")),
        report.gap_before,
        report.gap_after
    );
    Ok(())
}

fn train_config(common: &Common, args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = effective_config(common)?;
    apply_train_args(&mut cfg, args);
    finish(cfg)
}

fn cmd_train(common: &Common, args: &TrainArgs) -> Result<()> {
    let cfg = train_config(common, args)?;
    echo(&cfg);
    let mut out = Outputs::new(out_dir(&cfg), common.force);
    out.claim(&["report.json", "metrics.jsonl", "folds.json"])?;
    let records = load_cohort(required(&cfg.paths.cohort, "cohort", "--cohort", "cohort")?)?;
    let (encoder, mlp_a) = stage1_parts(&cfg)?;
    let run = cross_validate(&cfg, &records, &encoder, &mlp_a, common.jobs)?;
    let report = RunReport::new(&cfg, &run);
    out.stage_json("report.json", &report)?;
    out.stage_text("metrics.jsonl", &metrics_jsonl(&run)?)?;
    out.stage_json("folds.json", &run.plan)?;
    if args.save_models {
        for f in &run.folds {
            let p = out.stage_path(&format!("models/fold_{:02}.ckpt", f.result.fold))?;
            f.model.to_checkpoint()?.write(&p)?;
        }
    }
    out.commit()?;
    let c = report.aggregate.c_index;
    println!("C-index {:.4} ± {:.4} over {} folds", c.mean, c.std, c.n);
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    tool: String,
    model: PathBuf,
    cohort: PathBuf,
    n: usize,
    c_index: f64,
    mean_loss: f64,
}

fn cmd_eval(common: &Common, model: &Path, cohort: Option<&PathBuf>) -> Result<()> {
    let mut cfg = effective_config(common)?;
    if let Some(c) = cohort {
        cfg.paths.cohort = Some(c.clone());
    }
    let cfg = finish(cfg)?;
    let mut out = Outputs::new(out_dir(&cfg), common.force);
    out.claim(&["eval.json"])?;
    let cohort = required(&cfg.paths.cohort, "cohort", "--cohort", "cohort")?;
    let records = load_cohort(cohort)?;
    let m = FusionModel::from_checkpoint(&Checkpoint::read(model)?)?;
    let data = PreparedCohort::new(&m, &records)?;
    let metrics = evaluate(&m, &data)?;
    out.stage_json(
        "eval.json",
        &EvalOutput {
            tool: pipeline::tool_version(),
            model: model.to_path_buf(),
            cohort: cohort.to_path_buf(),
            n: records.len(),
            c_index: metrics.c_index,
            mean_loss: metrics.mean_loss,
        },
    )?;
    out.commit()?;
    println!("C-index {:.4}, mean loss {:.5} on {} patients", metrics.c_index, metrics.mean_loss, records.len());
    Ok(())
}

#[derive(Debug, Serialize)]
struct AblationOutput {
    tool: String,
    config: RunConfig,
    rows: Vec<pipeline::AblationRow>,
    generated: pipeline::Generated,
}

fn cmd_ablate(common: &Common, args: &TrainArgs, cells: Option<&PathBuf>) -> Result<()> {
    let mut cfg = effective_config(common)?;
    apply_train_args(&mut cfg, args);
    if let Some(c) = cells {
        cfg.paths.cells = Some(c.clone());
    }
    // each row sets its own fusion and modulation switches
    cfg.fusion_mode = FusionMode::Concat;
    cfg.modulation.enabled = false;
    let cfg = finish(cfg)?;
    echo(&cfg);
    let mut out = Outputs::new(out_dir(&cfg), common.force);
    out.claim(&["ablation.csv", "ablation.json"])?;
    let records = load_cohort(required(&cfg.paths.cohort, "cohort", "--cohort", "cohort")?)?;
    let (encoder, smoothed) = match (&cfg.paths.checkpoint, &cfg.paths.cells) {
        (Some(p), _) => {
            let ck = Checkpoint::read(p)?;
            (FrozenEncoder::get(&ck, "encoder")?, ck.get_mlp("mlp_a")?)
        }
        (None, Some(c)) => {
            let cells = load_cells_csv(c, cfg.num_cell_types)?;
            let (encoder, outcome, _) = pretrain(&cfg, &cells)?;
            (encoder, outcome.mlp_a)
        }
        (None, None) => {
            return Err(Error::Config(
                "ablation needs a stage-1 checkpoint (--checkpoint) or a cell corpus (--cells)".into(),
            ))
        }
    };
    let rows = ablate(&cfg, &records, &encoder, &smoothed, common.jobs)?;
    out.stage_text("ablation.csv", &ablation_csv(&rows)?)?;
    out.stage_json(
        "ablation.json",
        &AblationOutput {
            tool: pipeline::tool_version(),
            config: cfg.clone(),
            rows: rows.clone(),
            generated: pipeline::Generated::now(),
        },
    )?;
    out.commit()?;
    for r in &rows {
        println!(
            "{} smoothing {:<3} {:<10} {:.4} ± {:.4}",
            r.row,
            if r.smoothing { "on" } else { "off" },
            r.fusion.name(),
            r.c_index_mean,
            r.c_index_std
        );
    }
    Ok(())
}

fn cmd_gradcheck(common: &Common) -> Result<bool> {
    let cfg = finish(effective_config(common)?)?;
    let summary = gradcheck::run_suite(cfg.seed)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if !summary.passed {
        eprintln!("gradient check failed");
    }
    Ok(summary.passed)
}

/// Runs one command. `Ok(false)` means the command ran but its check failed.
pub fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::GenCohort { common, n_patients } => cmd_gen_cohort(common, *n_patients)?,
        Command::GenCells { common } => cmd_gen_cells(common)?,
        Command::PretrainSmooth { common, cells, epochs } => cmd_pretrain(common, cells.as_ref(), *epochs)?,
        Command::Train { common, args } => cmd_train(common, args)?,
        Command::Eval { common, model, cohort } => cmd_eval(common, model, cohort.as_ref())?,
        Command::Ablate { common, args, cells } => cmd_ablate(common, args, cells.as_ref())?,
        Command::Gradcheck { common } => return cmd_gradcheck(common),
    }
    Ok(true)
}

/// Parses `args` (program name first) and runs.
pub fn run_from<I, T>(args: I) -> Result<bool>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    run(cli)
}
