use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_neoseize"));
    c.env("RUST_LOG", "warn");
    c
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"profile = "synthetic"
seed = 11

[paths]
raw_dir = "{root}/raw"
cache_dir = "{root}/cache"
runs_dir = "{root}/runs"

[synth]
n_subjects = 2

[eval]
folds = 3

[train]
max_epochs = 2
{extra}"#,
        root = dir.display()
    );
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn run(config: &Path, args: &[&str]) -> Output {
    bin().arg("--config").arg(config).args(args).output().unwrap()
}

fn run_ok(config: &Path, args: &[&str]) -> PathBuf {
    let out = run(config, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
}

fn prepare(config: &Path) {
    for cmd in ["synth", "ingest", "featurize"] {
        run_ok(config, &[cmd]);
    }
}

#[test]
fn synthetic_pipeline_runs_through_cross_validation() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "");
    prepare(&cfg);
    let dir = run_ok(&cfg, &["train-cv"]);
    let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), "run_id,trial,fold,acc,sen,spec,f1,auc,tp,fp,tn,fn");
    assert_eq!(lines.count(), 3);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train-cv");
    assert_eq!(manifest["seed"], 11);
    assert!(!manifest["inputs"].as_array().unwrap().is_empty());
    let outputs: Vec<&str> = manifest["outputs"].as_array().unwrap().iter().map(|o| o["path"].as_str().unwrap()).collect();
    assert!(outputs.contains(&"metrics.csv"));
    assert!(outputs.contains(&"config.toml"));
    assert!(dir.join("summary.json").is_file());
    assert!(dir.join("checkpoints/trial0_fold2.nsmodel").is_file());
}

#[test]
fn identical_configuration_reproduces_metrics() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "");
    prepare(&cfg);
    let a = run_ok(&cfg, &["train-cv"]);
    let b = run_ok(&cfg, &["train-cv"]);
    assert_ne!(a, b);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());

    let c = run_ok(&cfg, &["--seed", "12", "train-cv"]);
    let head = |p: &Path| fs::read_to_string(p.join("metrics.csv")).unwrap().lines().nth(1).unwrap().to_string();
    assert_ne!(head(&a).split(',').next(), head(&c).split(',').next(), "seed is part of the run id");
}

#[test]
fn ingest_reuses_cached_segments() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "");
    run_ok(&cfg, &["synth"]);
    let first = run_ok(&cfg, &["ingest"]);
    let second = run_ok(&cfg, &["ingest"]);
    let created = |p: &Path| {
        fs::read_to_string(p.join("segments.csv")).unwrap().lines().skip(1).map(|l| l.ends_with("true")).collect::<Vec<_>>()
    };
    assert_eq!(created(&first), vec![true, true]);
    assert_eq!(created(&second), vec![false, false]);
}

#[test]
fn missing_raw_directory_names_the_field() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = run(&cfg, &["ingest"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("paths.raw_dir"));
}

#[test]
fn featurize_before_ingest_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "");
    run_ok(&cfg, &["synth"]);
    let out = run(&cfg, &["featurize"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ingest"));
}

#[test]
fn invalid_configuration_names_the_field() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "lr = -1.0\n");
    let out = run(&cfg, &["train-cv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.lr"));

    let out = run(&write_config(tmp.path(), ""), &["--set", "mfcc.n_mels=oops", "synth"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mfcc.n_mels"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(bin().arg("no-such-command").output().unwrap().status.code(), Some(2));
    assert_eq!(bin().args(["train-cv", "--set", "missing-equals"]).output().unwrap().status.code(), Some(2));
    assert_eq!(neoseize_cli::run(["neoseize"]), 2);
}

#[test]
fn finetune_requires_pretrained_directory() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "");
    prepare(&cfg);
    let out = run(&cfg, &["finetune"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("paths.pretrained_dir"));
}

#[test]
fn lopo_then_finetune() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "");
    prepare(&cfg);
    let lopo = run_ok(&cfg, &["train-lopo"]);
    let table = fs::read_to_string(lopo.join("lopo.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert!(table.lines().last().unwrap().contains(",mean,"));
    let pre = format!("paths.pretrained_dir={}", lopo.display());
    let ft = run_ok(&cfg, &["--set", &pre, "--set", "eval.finetune_sizes=[12]", "--set", "eval.finetune_epochs=2", "finetune"]);
    let table = fs::read_to_string(ft.join("finetune.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(ft.join("checkpoints/ft24_synth01.nsmodel").is_file());
}

#[test]
fn explain_then_scalp_plot() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "[explain]\nn_permutations = 1\nn_average = 1\n");
    prepare(&cfg);
    let ex = run_ok(&cfg, &["explain"]);
    let imp = fs::read_to_string(ex.join("importance/synth01.csv")).unwrap();
    assert_eq!(imp.lines().next().unwrap(), "channel_name,raw_I,processed");
    assert_eq!(imp.lines().count(), 20);
    let set = format!("paths.explain_dir={}", ex.display());
    let sp = run_ok(&cfg, &["--set", &set, "scalp-plot"]);
    let svg = fs::read_to_string(sp.join("scalp/synth02.svg")).unwrap();
    assert!(svg.contains("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("class=\"edge\"").count(), 18);
}
