use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use survfuse::cli::run_from;
use survfuse::cohort::{load_cohort, write_cohort};
use survfuse::Error;
use tempfile::TempDir;

const SMALL: &str = "\
k_folds = 3
epochs = 1
hidden_dim = 16
[smoothing]
enabled = false
embed_dim = 8
feature_dim = 8
stage1_epochs = 2
[model]
snn_hidden = 8
snn_out = 8
genomic_dim = 8
image_hidden = 8
image_dim = 8
[cohort]
n_patients = 90
[cells]
cells_per_type = 6
";

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("small.toml"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> survfuse::Result<bool> {
        let mut argv = vec!["survfuse".to_string()];
        let (cmd, rest) = args.split_first().unwrap();
        argv.push(cmd.to_string());
        argv.push("--config".into());
        argv.push(self.path("small.toml").display().to_string());
        for a in rest {
            // `@name` resolves inside the sandbox
            if let Some(name) = a.strip_prefix('@') {
                argv.push(self.path(name).display().to_string());
            } else {
                argv.push(a.to_string());
            }
        }
        run_from(argv)
    }

    fn cohort(&self) {
        self.run(&["gen-cohort", "--out", "@."]).unwrap();
    }
}

fn no_partials(dir: &Path) -> bool {
    fs::read_dir(dir)
        .unwrap()
        .all(|e| !e.unwrap().file_name().to_string_lossy().ends_with(".partial"))
}

fn without_timestamp(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("generated");
    v
}

#[test]
fn outputs_are_not_overwritten_without_force() {
    let sb = Sandbox::new();
    sb.cohort();
    let first = fs::read(sb.path("cohort.csv")).unwrap();
    let err = sb.run(&["gen-cohort", "--out", "@."]).unwrap_err();
    assert!(err.to_string().contains("--force"), "{err}");
    sb.run(&["gen-cohort", "--out", "@.", "--seed", "9", "--force"]).unwrap();
    assert_ne!(fs::read(sb.path("cohort.csv")).unwrap(), first);
    assert!(no_partials(sb.dir.path()));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let sb = Sandbox::new();
    fs::write(sb.path("bad.toml"), "epochz = 3\n").unwrap();
    let bad = sb.path("bad.toml");
    let argv = ["survfuse", "gen-cohort", "--config", bad.to_str().unwrap()];
    let err = run_from(argv).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("epochz"), "{err}");
}

#[test]
fn smoothing_needs_a_stage1_checkpoint() {
    let sb = Sandbox::new();
    sb.cohort();
    let err = sb
        .run(&["train", "--cohort", "@cohort.csv", "--smoothing", "on", "--out", "@run"])
        .unwrap_err();
    assert!(err.to_string().contains("--checkpoint"), "{err}");
}

#[test]
fn kronecker_with_modulation_is_a_config_error() {
    let sb = Sandbox::new();
    sb.cohort();
    let err = sb
        .run(&["train", "--cohort", "@cohort.csv", "--fusion", "kronecker", "--modulation", "on", "--out", "@run"])
        .unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let sb = Sandbox::new();
    sb.cohort();
    sb.run(&["gen-cells", "--out", "@."]).unwrap();
    sb.run(&["pretrain-smooth", "--cells", "@cells.csv", "--out", "@."]).unwrap();
    let stage1: serde_json::Value = serde_json::from_str(&fs::read_to_string(sb.path("stage1_report.json")).unwrap()).unwrap();
    assert_eq!(stage1["epoch_losses"].as_array().unwrap().len(), 2);

    sb.run(&[
        "train", "--cohort", "@cohort.csv", "--checkpoint", "@stage1.ckpt", "--smoothing", "on", "--out", "@run",
        "--save-models",
    ])
    .unwrap();
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(sb.path("run/report.json")).unwrap()).unwrap();
    assert_eq!(report["folds"].as_array().unwrap().len(), 3);
    let c = report["aggregate"]["c_index"]["mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&c));

    let metrics = fs::read_to_string(sb.path("run/metrics.jsonl")).unwrap();
    let epochs = metrics
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["kind"] == "epoch")
        .count();
    assert_eq!(epochs, 3);
    for f in 0..3 {
        assert!(sb.path(&format!("run/models/fold_{f:02}.ckpt")).exists());
    }

    sb.run(&["eval", "--model", "@run/models/fold_00.ckpt", "--cohort", "@cohort.csv", "--out", "@ev"]).unwrap();
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(sb.path("ev/eval.json")).unwrap()).unwrap();
    assert_eq!(eval["n"], 90);

    sb.run(&["ablate", "--cohort", "@cohort.csv", "--checkpoint", "@stage1.ckpt", "--out", "@ab"]).unwrap();
    let csv = fs::read_to_string(sb.path("ab/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "row,smoothing,fusion,c_index_mean,c_index_std");
    assert_eq!(lines.len(), 7);
    assert!(no_partials(&sb.path("run")));
}

#[test]
fn parallel_folds_match_sequential() {
    let sb = Sandbox::new();
    sb.cohort();
    sb.run(&["train", "--cohort", "@cohort.csv", "--out", "@run"]).unwrap();
    let a = without_timestamp(&sb.path("run/report.json"));
    let ma = fs::read(sb.path("run/metrics.jsonl")).unwrap();
    sb.run(&["train", "--cohort", "@cohort.csv", "--out", "@run", "--jobs", "3", "--force"]).unwrap();
    assert_eq!(without_timestamp(&sb.path("run/report.json")), a);
    assert_eq!(fs::read(sb.path("run/metrics.jsonl")).unwrap(), ma);
}

#[test]
fn eval_without_comparable_pairs_fails() {
    let sb = Sandbox::new();
    sb.cohort();
    sb.run(&["train", "--cohort", "@cohort.csv", "--out", "@run", "--save-models"]).unwrap();
    let mut records = load_cohort(&sb.path("cohort.csv")).unwrap();
    for r in &mut records {
        r.event = false;
    }
    write_cohort(&sb.path("censored.csv"), &records).unwrap();
    let err = sb
        .run(&["eval", "--model", "@run/models/fold_00.ckpt", "--cohort", "@censored.csv", "--out", "@ev"])
        .unwrap_err();
    assert!(matches!(err, Error::Undefined(_)), "{err}");
    assert!(!sb.path("ev/eval.json").exists());
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_survfuse");
    let dir = tempfile::tempdir().unwrap();
    let ok = Command::new(bin).args(["gradcheck"]).output().unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(summary["passed"], true);

    let missing = Command::new(bin)
        .args(["train", "--smoothing", "off", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&missing.stderr);
    assert!(stderr.lines().any(|l| l.starts_with("error: ") && l.contains("--cohort")), "{stderr}");
}
