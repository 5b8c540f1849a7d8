//! One function per run mode. Each returns the files to write; nothing here
//! touches the filesystem except `eval`, which reads its checkpoint.

use std::fmt::Write as _;
use std::time::Instant;

use bayeslora::hpo::pareto_table_csv;
use bayeslora::metrics::{CalibrationReport, ECE_BINS};
use bayeslora::model::AdapterSet;
use bayeslora::params::Parameterized;
use bayeslora::rng::stream;
use bayeslora::toybench::{
    make_task, pretrain_base, run_grid, summarize, tune_adapter, GridConfig, GridRow, MethodSpec, TaskBundle, TaskSpec, ToyModel,
};
use bayeslora::trainer::{evaluate, train, TrainConfig};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::{Mode, RunConfig};
use crate::CliError;

/// Files produced by a mode plus a JSON summary for the manifest.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub files: Vec<(String, Vec<u8>)>,
    pub summary: serde_json::Value,
}

impl Artifacts {
    fn add(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), bytes.into()));
    }
}

pub fn execute(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    match cfg.mode.expect("validated config has a mode") {
        Mode::Train => train_mode(cfg),
        Mode::Eval => eval_mode(cfg),
        Mode::SweepSamples => sweep_mode(cfg),
        Mode::Hpo => hpo_mode(cfg),
        Mode::MapRecovery => {
            let methods = vec![MethodSpec::map_lora(), MethodSpec::degenerate(), bayes_arm(cfg, cfg.method.flow_depth, cfg.method.inducing_dim)];
            grid_mode(cfg, &methods, true)
        }
        Mode::AblateFlow => {
            let methods: Vec<MethodSpec> = cfg.ablation.flow_depths.iter().map(|&l| bayes_arm(cfg, l, cfg.method.inducing_dim)).collect();
            grid_mode(cfg, &methods, false)
        }
        Mode::AblateRank => {
            let methods: Vec<MethodSpec> = cfg.ablation.inducing_dims.iter().map(|&r| bayes_arm(cfg, cfg.method.flow_depth, r)).collect();
            grid_mode(cfg, &methods, false)
        }
    }
}

fn bayes_arm(cfg: &RunConfig, flow_depth: usize, inducing: usize) -> MethodSpec {
    MethodSpec::bayes(flow_depth, inducing, cfg.method.eval_samples)
}

fn task_for(cfg: &RunConfig, seed: u64) -> Result<TaskBundle, CliError> {
    Ok(make_task(&TaskSpec { seed, ..cfg.task.clone() })?)
}

fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x5eed
}

pub const METRICS_HEADER: &str = "method,seed,split,acc,ece,nll,brier,trainable_params,analytic_params";

fn metrics_row(out: &mut String, method: &str, seed: u64, split: &str, r: &CalibrationReport, trainable: usize, analytic: usize) {
    let _ = writeln!(out, "{method},{seed},{split},{},{},{},{},{trainable},{analytic}", r.acc, r.ece, r.nll, r.brier);
}

pub const BINS_HEADER: &str = "seed,split,bin,lower,upper,count,mean_conf,mean_acc";

fn bins_rows(out: &mut String, seed: u64, split: &str, r: &CalibrationReport) {
    for (b, bin) in r.bins.iter().enumerate() {
        let _ = writeln!(
            out,
            "{seed},{split},{b},{},{},{},{},{}",
            b as f64 / ECE_BINS as f64,
            (b + 1) as f64 / ECE_BINS as f64,
            bin.count,
            bin.mean_conf,
            bin.mean_acc
        );
    }
}

struct Trained {
    task: TaskBundle,
    base: ToyModel,
    adapters: AdapterSet,
    history: Vec<serde_json::Value>,
    train_time: f64,
}

fn train_seed(cfg: &RunConfig, spec: &MethodSpec, seed: u64) -> Result<Trained, CliError> {
    let task = task_for(cfg, seed)?;
    let base = pretrain_base(&task, &cfg.pretrain, seed)?;
    let adapters = AdapterSet::build(&base, &spec.adapter, &mut stream(seed, &format!("adapters/{}", spec.label)))?;
    let tcfg = TrainConfig { seed, ..cfg.train.clone() };
    let mut history = Vec::new();
    let start = Instant::now();
    let outcome = train(&base, adapters, &task.train, &task.val, &tcfg, |rec| {
        history.push(json!({ "seed": seed, "method": spec.label, "record": rec }));
    })?;
    if let Some(reason) = &outcome.diverged {
        log::warn!("seed {seed}: {reason}; keeping the best checkpoint");
    }
    history.push(json!({
        "seed": seed,
        "method": spec.label,
        "selected_epoch": outcome.best_epoch,
        "best_val_nll": outcome.best_val_nll,
        "initial_val_nll": outcome.initial_val_nll,
        "diverged": outcome.diverged,
    }));
    Ok(Trained { task, base, adapters: outcome.adapters, history, train_time: start.elapsed().as_secs_f64() })
}

/// Metrics and reliability bins of one trained model on both test splits.
fn score(
    spec: &MethodSpec,
    seed: u64,
    task: &TaskBundle,
    base: &ToyModel,
    adapters: &AdapterSet,
    eval_batch: usize,
    metrics: &mut String,
    bins: &mut String,
) -> Result<(), CliError> {
    let analytic = AdapterSet::analytic_parameter_count(base, &spec.adapter);
    for (split, data) in [("id", &task.test_id), ("ood", &task.test_ood)] {
        let r = evaluate(base, adapters, data, spec.eval_samples, eval_batch, eval_seed(seed))?;
        metrics_row(metrics, &spec.label, seed, split, &r, adapters.parameter_count(), analytic);
        bins_rows(bins, seed, split, &r);
    }
    Ok(())
}

fn seed_prefix(seed: u64) -> String {
    format!("seed-{seed}")
}

fn train_mode(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let spec = cfg.method.spec();
    let mut metrics = format!("{METRICS_HEADER}\n");
    let mut bins = format!("{BINS_HEADER}\n");
    let mut history = String::new();
    let mut timings = String::from("method,seed,train_seconds\n");
    let portable = RunConfig { out: None, ..cfg.clone() };
    let mut ckpt = Checkpoint::new(serde_json::to_string(&portable).map_err(|e| CliError::Runtime(e.to_string()))?);
    for &seed in &cfg.seeds {
        let t = train_seed(cfg, &spec, seed)?;
        score(&spec, seed, &t.task, &t.base, &t.adapters, cfg.train.eval_batch_size, &mut metrics, &mut bins)?;
        for line in &t.history {
            history += &(line.to_string() + "\n");
        }
        let _ = writeln!(timings, "{},{seed},{}", spec.label, t.train_time);
        ckpt.add_params(&seed_prefix(seed), &t.base);
        ckpt.add_params(&seed_prefix(seed), &t.adapters);
    }
    let mut a = Artifacts::default();
    a.add("metrics.csv", metrics);
    a.add("bins.csv", bins);
    a.add("history.jsonl", history);
    a.add("timings.csv", timings);
    a.add("checkpoint.bin", ckpt.to_bytes());
    a.summary = json!({ "method": spec.label });
    Ok(a)
}

fn eval_mode(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let path = cfg.checkpoint.as_ref().expect("validated eval config has a checkpoint");
    let bytes = std::fs::read(path).map_err(|e| CliError::Runtime(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    let trained: RunConfig =
        serde_json::from_str(&ckpt.meta).map_err(|e| CliError::Checkpoint(format!("embedded configuration is unreadable: {e}")))?;
    let spec = trained.method.spec();
    let mut metrics = format!("{METRICS_HEADER}\n");
    let mut bins = format!("{BINS_HEADER}\n");
    for &seed in &trained.seeds {
        let task = task_for(&trained, seed)?;
        let mut base = ToyModel::new(
            trained.pretrain.architecture,
            task.pretrain.features(),
            trained.pretrain.width,
            task.spec.n_classes,
            &mut stream(seed, "base-init"),
        );
        ckpt.restore_params(&seed_prefix(seed), &mut base)?;
        let mut adapters = AdapterSet::build(&base, &spec.adapter, &mut stream(seed, &format!("adapters/{}", spec.label)))?;
        ckpt.restore_params(&seed_prefix(seed), &mut adapters)?;
        score(&spec, seed, &task, &base, &adapters, trained.train.eval_batch_size, &mut metrics, &mut bins)?;
    }
    let mut a = Artifacts::default();
    a.add("metrics.csv", metrics);
    a.add("bins.csv", bins);
    a.summary = json!({ "checkpoint": path, "method": spec.label, "seeds": trained.seeds });
    Ok(a)
}

/// Coefficient of determination of the least-squares line through `(x, y)`.
pub fn linear_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}

fn sweep_mode(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let spec = cfg.method.spec();
    let mut metrics = String::from("method,seed,samples,split,acc,ece,nll,brier\n");
    let mut timings = String::from("seed,samples,eval_seconds\n");
    let mut mean_time = vec![0.0; cfg.sweep.samples.len()];
    for &seed in &cfg.seeds {
        let t = train_seed(cfg, &spec, seed)?;
        for (k, &s) in cfg.sweep.samples.iter().enumerate() {
            for (split, data) in [("id", &t.task.test_id), ("ood", &t.task.test_ood)] {
                let start = Instant::now();
                let r = evaluate(&t.base, &t.adapters, data, s, cfg.train.eval_batch_size, eval_seed(seed))?;
                let secs = start.elapsed().as_secs_f64();
                let _ = writeln!(metrics, "{},{seed},{s},{split},{},{},{},{}", spec.label, r.acc, r.ece, r.nll, r.brier);
                if split == "ood" {
                    let _ = writeln!(timings, "{seed},{s},{secs}");
                    mean_time[k] += secs / cfg.seeds.len() as f64;
                }
            }
        }
    }
    let xs: Vec<f64> = cfg.sweep.samples.iter().map(|&s| s as f64).collect();
    let mut a = Artifacts::default();
    a.add("metrics.csv", metrics);
    a.add("timings.csv", timings);
    a.summary = json!({ "method": spec.label, "time_vs_samples_r2": linear_r2(&xs, &mean_time) });
    Ok(a)
}

fn hpo_mode(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let spec = cfg.method.spec();
    let seed = cfg.seeds[0];
    let task = task_for(cfg, seed)?;
    let base = pretrain_base(&task, &cfg.pretrain, seed)?;
    let hpo = bayeslora::hpo::CboConfig { seed, ..cfg.hpo.clone() };
    let archive = tune_adapter(&task, &base, &spec, seed, &cfg.train, &hpo)?;
    let mut metrics = String::from("method,seed,round,lr,wd,val_acc,val_nll,val_ece\n");
    let op = archive.operating_point(1);
    if let Some(i) = op {
        let e = &archive.entries()[i];
        let (lr, wd) = bayeslora::hpo::hyperparameters(&e.x);
        let _ = writeln!(metrics, "{},{seed},{},{lr:e},{wd:e},{},{},{}", spec.label, e.round, -e.objectives[2], e.objectives[1], e.objectives[0]);
    }
    let mut a = Artifacts::default();
    a.add("metrics.csv", metrics);
    a.add("archive.csv", archive.to_csv());
    a.add("pareto.csv", pareto_table_csv(&archive)?);
    a.summary = json!({
        "method": spec.label,
        "evaluations": archive.len(),
        "feasible": archive.feasible().len(),
        "front_size": archive.front().len(),
        "operating_point": op.map(|i| &archive.entries()[i]),
    });
    Ok(a)
}

fn grid_mode(cfg: &RunConfig, methods: &[MethodSpec], table: bool) -> Result<Artifacts, CliError> {
    let grid = GridConfig { task: cfg.task.clone(), pretrain: cfg.pretrain.clone(), train: cfg.train.clone(), parallel: cfg.parallel };
    let rows = run_grid(&grid, methods, &cfg.seeds)?;
    let failed: Vec<String> = rows
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| format!("{} seed {}: {e}", r.method, r.seed)))
        .collect();
    let mut metrics = String::from("method,seed,split,acc,ece,nll,brier,trainable_params,analytic_params,error\n");
    let mut timings = String::from("method,seed,train_seconds\n");
    for r in &rows {
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        let _ = writeln!(
            metrics,
            "{},{},{},{},{},{},{},{},{},{err}",
            r.method, r.seed, r.split, r.acc, r.ece, r.nll, r.brier, r.trainable_params, r.analytic_params
        );
        if r.split == "id" {
            let _ = writeln!(timings, "{},{},{}", r.method, r.seed, r.train_time);
        }
    }
    let summaries = summarize(&rows);
    let mut summary = String::from("method,split,n,acc_mean,acc_std,ece_mean,ece_std,nll_mean,nll_std,acc_median,ece_median,nll_median\n");
    for s in &summaries {
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            s.method, s.split, s.n, s.acc.0, s.acc.1, s.ece.0, s.ece.1, s.nll.0, s.nll.1, s.median_acc, s.median_ece, s.median_nll
        );
    }
    let mut a = Artifacts::default();
    a.add("metrics.csv", metrics);
    a.add("summary.csv", summary);
    a.add("timings.csv", timings);
    if table {
        a.add("recovery.csv", recovery_table(&rows));
    }
    a.summary = json!({ "methods": methods.iter().map(|m| &m.label).collect::<Vec<_>>(), "failed_cells": failed });
    Ok(a)
}

/// Three rows (MAP, degenerate, full) with columns in the order ACC, ECE,
/// NLL, each as mean and std over seeds on the in-distribution split.
pub fn recovery_table(rows: &[GridRow]) -> String {
    let mut out = String::from("method,acc,acc_std,ece,ece_std,nll,nll_std\n");
    for s in summarize(rows).iter().filter(|s| s.split == "id") {
        let _ = writeln!(out, "{},{},{},{},{},{},{}", s.method, s.acc.0, s.acc.1, s.ece.0, s.ece.1, s.nll.0, s.nll.1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r2_of_a_line_is_one() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((linear_r2(&x, &[3.0, 5.0, 7.0, 9.0]) - 1.0).abs() < 1e-12);
        assert!(linear_r2(&x, &[1.0, -1.0, 1.0, -1.0]) < 0.5);
    }
}
