use std::path::Path;
use std::process::{Command, Output};

use dualora::losses::Strategy;
use dualora::pipeline::ExperimentSpec;
use dualora::training::TrainPlan;

fn dualora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualora"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn tiny_spec(dir: &Path) -> std::path::PathBuf {
    let mut spec = ExperimentSpec::default();
    spec.data.pretrain_count = 40;
    spec.data.train_count = 20;
    spec.data.dev_count = 4;
    spec.data.test_count = 6;
    spec.pretrain.total_steps = 10;
    spec.pretrain.batch_size = 4;
    spec.seeds = vec![1];
    spec.finetune = ["voc", "cns-l2-w1.0"]
        .iter()
        .map(|id| TrainPlan {
            total_steps: 4,
            batch_size: 4,
            ..TrainPlan::finetune(Strategy::parse(id).unwrap(), 1)
        })
        .collect();
    spec.out_dir = dir.join("run");
    let path = dir.join("spec.json");
    std::fs::write(&path, spec.to_json()).unwrap();
    path
}

#[test]
fn show_spec_prints_the_default_spec() {
    let out = dualora(&["show-spec"]);
    assert!(out.status.success());
    let spec: ExperimentSpec = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(spec, ExperimentSpec::default());
}

#[test]
fn stages_report_missing_prerequisites() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path());
    let spec = spec.to_str().unwrap();

    let out = dualora(&["pretrain", "--spec", spec]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("gen-data"), "{}", stderr(&out));

    assert!(dualora(&["gen-data", "--spec", spec]).status.success());
    let out = dualora(&["finetune", "--spec", spec, "--strategy", "voc"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("pretrain"), "{}", stderr(&out));

    let out = dualora(&["eval", "--spec", spec]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("pretrained"), "{}", stderr(&out));
}

#[test]
fn unknown_strategy_and_seed_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path());
    let spec = spec.to_str().unwrap();
    let out = dualora(&["finetune", "--spec", spec, "--strategy", "cns-l3-w1.0"]);
    assert!(!out.status.success());
    let out = dualora(&["decode", "--spec", spec, "--strategy", "voc", "--seed", "7"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("seed 7"), "{}", stderr(&out));
}

#[test]
fn stage_by_stage_run_matches_grid() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path());
    let spec = spec.to_str().unwrap();
    let staged = dir.path().join("staged");
    let staged = staged.to_str().unwrap();
    for args in [
        vec!["gen-data"],
        vec!["pretrain"],
        vec!["finetune", "--strategy", "voc"],
        vec!["finetune", "--strategy", "cns-l2-w1.0", "--seed", "1"],
        vec!["decode"],
        vec!["eval"],
    ] {
        let mut full = args.clone();
        full.extend(["--spec", spec, "--out", staged]);
        let out = dualora(&full);
        assert!(out.status.success(), "{args:?}: {}", stderr(&out));
    }

    let grid = dir.path().join("grid");
    let out = dualora(&["grid", "--spec", spec, "--out", grid.to_str().unwrap(), "--jobs", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("| cns-l2-w1.0 |"), "{table}");

    for file in [
        "pretrain/model.ckpt",
        "finetune/voc/seed1/metrics.jsonl",
        "finetune/cns-l2-w1.0/seed1/model.ckpt",
        "finetune/cns-l2-w1.0/seed1/transcripts.jsonl",
        "reports/summary.csv",
        "reports/table.md",
    ] {
        let a = std::fs::read(Path::new(staged).join(file)).unwrap();
        let b = std::fs::read(grid.join(file)).unwrap();
        assert!(a == b, "{file} differs between staged and grid runs");
    }
}
