use std::path::Path;
use std::process::Command;

use bayeslora_cli::{run, Mode, RunConfig};

const SMALL: &str = r#"
seeds = [3]

[task]
n_pretrain = 300
n_train = 96
n_val = 48
n_test = 80

[pretrain]
epochs = 4
width = 16

[train]
epochs = 2
eval_every = 1

[method]
kind = "bayes_lora"
flow_depth = 1
inducing_dim = 4
eval_samples = 2
"#;

fn small(mode: Mode, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::parse(SMALL).unwrap();
    cfg.mode = Some(mode);
    cfg.out = Some(out.to_path_buf());
    cfg
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&read(&dir.join("manifest.json"))).unwrap()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bayeslora"))
}

#[test]
fn missing_mode_fails_with_a_record_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, "seeds = [1]\n").unwrap();
    let out = dir.path().join("out");
    let res = bin().arg("--config").arg(&cfg_path).arg("--out").arg(&out).output().unwrap();
    assert_eq!(res.status.code(), Some(2));
    let record: serde_json::Value = serde_json::from_slice(&res.stderr).unwrap();
    assert_eq!(record["status"], "error");
    assert_eq!(record["kind"], "config");
    assert!(record["errors"].as_array().unwrap().iter().any(|e| e.as_str().unwrap().starts_with("mode:")));
    assert!(out.join("error.json").exists());
}

#[test]
fn all_violations_are_reported_together() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, "mode = \"sweep-samples\"\nseeds = []\n[method]\nkind = \"map_lora\"\n[sweep]\nsamples = []\n").unwrap();
    let res = bin().arg("--config").arg(&cfg_path).output().unwrap();
    assert_eq!(res.status.code(), Some(2));
    let record: serde_json::Value = serde_json::from_slice(&res.stderr).unwrap();
    let errors: Vec<&str> = record["errors"].as_array().unwrap().iter().map(|e| e.as_str().unwrap()).collect();
    for field in ["out:", "seeds:", "method.kind:", "sweep.samples:"] {
        assert!(errors.iter().any(|e| e.starts_with(field)), "{field} missing from {errors:?}");
    }
}

#[test]
fn unknown_keys_and_modes_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, "mode = \"train\"\n[train]\nepochz = 3\n").unwrap();
    let res = bin().arg("--config").arg(&cfg_path).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("epochz"));
    let res = bin().arg("--mode").arg("fit").output().unwrap();
    assert!(!res.status.success());
}

#[test]
fn train_is_deterministic_and_eval_reproduces_its_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, e) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("eval"));
    let report = run(&small(Mode::Train, &a)).unwrap();
    run(&small(Mode::Train, &b)).unwrap();
    for f in ["metrics.csv", "bins.csv", "checkpoint.bin"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs between identical runs");
    }
    let m = manifest(&a);
    let listed: Vec<&str> = m["artifacts"].as_array().unwrap().iter().map(|x| x["file"].as_str().unwrap()).collect();
    for f in &report.files {
        assert!(a.join(f).exists());
        assert!(f == "manifest.json" || listed.contains(&f.as_str()), "{f} not in manifest");
    }
    assert_eq!(m["seeds"][0], 3);
    assert_eq!(m["config"]["mode"], "train");

    let mut cfg = RunConfig::parse("mode = \"eval\"").unwrap();
    cfg.out = Some(e.clone());
    cfg.checkpoint = Some(a.join("checkpoint.bin"));
    run(&cfg).unwrap();
    let saved = read(&a.join("metrics.csv"));
    let again = read(&e.join("metrics.csv"));
    let rows = |s: &str| -> Vec<Vec<String>> { s.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect() };
    let (r1, r2) = (rows(&saved), rows(&again));
    assert_eq!(r1.len(), 2);
    assert_eq!(r1.len(), r2.len());
    for (x, y) in r1.iter().zip(&r2) {
        assert_eq!(x[..3], y[..3]);
        for k in 3..7 {
            let (p, q): (f64, f64) = (x[k].parse().unwrap(), y[k].parse().unwrap());
            assert!((p - q).abs() <= 1e-9, "column {k}: {p} vs {q}");
        }
    }
    assert_eq!(read(&a.join("bins.csv")), read(&e.join("bins.csv")));
    assert!(read(&a.join("history.jsonl")).lines().count() >= 2);
}

#[test]
fn map_recovery_emits_the_three_row_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Mode::MapRecovery, dir.path());
    cfg.seeds = vec![1, 2];
    run(&cfg).unwrap();
    let table = read(&dir.path().join("recovery.csv"));
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "method,acc,acc_std,ece,ece_std,nll,nll_std");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("map_lora,"));
    assert!(lines[2].starts_with("degenerate,"));
    assert!(lines[3].starts_with("bayes_lora"));
    assert_eq!(read(&dir.path().join("metrics.csv")).lines().count(), 1 + 3 * 2 * 2);
}

#[test]
fn sweep_and_hpo_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = dir.path().join("sweep");
    let mut cfg = small(Mode::SweepSamples, &sweep);
    cfg.sweep.samples = vec![1, 2, 3];
    let report = run(&cfg).unwrap();
    assert!(report.summary["time_vs_samples_r2"].is_number());
    assert_eq!(read(&sweep.join("metrics.csv")).lines().count(), 1 + 3 * 2);

    let hpo = dir.path().join("hpo");
    let mut cfg = small(Mode::Hpo, &hpo);
    cfg.hpo.initial_points = 3;
    cfg.hpo.rounds = 2;
    cfg.hpo.candidates = 16;
    cfg.hpo.mc_samples = 4;
    run(&cfg).unwrap();
    assert!(read(&hpo.join("pareto.csv")).starts_with("candidate,acc,nll,ece,lr,wd\n"));
    assert_eq!(read(&hpo.join("archive.csv")).lines().count(), 1 + 5);
    assert_eq!(manifest(&hpo)["summary"]["evaluations"], 5);
}

#[test]
fn ablation_modes_cover_their_grids() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Mode::AblateFlow, dir.path());
    cfg.ablation.flow_depths = vec![0, 2];
    run(&cfg).unwrap();
    let summary = read(&dir.path().join("summary.csv"));
    assert!(summary.contains("bayes_lora_L0_r4_S2,"));
    assert!(summary.contains("bayes_lora_L2_r4_S2,"));

    let rank = dir.path().join("rank");
    let mut cfg = small(Mode::AblateRank, &rank);
    cfg.ablation.inducing_dims = vec![2, 4];
    run(&cfg).unwrap();
    assert!(read(&rank.join("summary.csv")).contains("bayes_lora_L1_r2_S2,"));
}
