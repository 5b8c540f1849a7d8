//! Desk-scale synthetic benchmark: Gaussian-mixture classification with a
//! controlled distribution shift, small frozen backbones, and the method
//! grid used to compare adapters.

use std::time::Instant;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hpo::{hyperparameters, run_cbo, CboConfig, Observation, ParetoArchive, SearchSpace, ADAPTER_OBJECTIVES};
use crate::linalg::Matrix;
use crate::model::{AdapterConfig, AdapterSet, Backbone, Dataset, DrawnAdapters};
use crate::params::{join, leaf, Parameterized};
use crate::rng::{stream, StreamRng};
use crate::tape::{Gradients, Tape, Var};
use crate::trainer::{evaluate, train, AdamW, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub input_dim: usize,
    pub n_classes: usize,
    pub seq_len: usize,
    pub n_pretrain: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Typical norm of a class mean.
    pub class_sep: f64,
    pub noise_std: f64,
    /// Typical norm of the per-class offset between the pretraining source
    /// and the task.
    pub source_shift: f64,
    pub rotation_deg: f64,
    pub mean_shift: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            input_dim: 16,
            n_classes: 4,
            seq_len: 1,
            n_pretrain: 2000,
            n_train: 2000,
            n_val: 500,
            n_test: 1000,
            class_sep: 3.0,
            noise_std: 1.0,
            source_shift: 2.0,
            rotation_deg: 30.0,
            mean_shift: 1.0,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 2 || self.n_classes < 2 || self.seq_len == 0 {
            return Err(Error::param("need input_dim ≥ 2, n_classes ≥ 2 and seq_len ≥ 1"));
        }
        if [self.n_pretrain, self.n_train, self.n_val, self.n_test].contains(&0) {
            return Err(Error::param("every split needs at least one example"));
        }
        if !(self.noise_std > 0.0) || self.class_sep < 0.0 || self.source_shift < 0.0 {
            return Err(Error::param("noise_std must be positive, separations nonnegative"));
        }
        Ok(())
    }
}

/// Mixture parameters plus the shift applied to the OOD split.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub means: Vec<Vec<f64>>,
    pub noise_std: f64,
    pub seq_len: usize,
    pub rotation: Matrix,
    pub offset: Vec<f64>,
}

impl Generator {
    fn sample(&self, n: usize, shifted: bool, rng: &mut StreamRng) -> Dataset {
        let d = self.means[0].len();
        let k = self.means.len();
        let t = self.seq_len;
        let noise = Normal::new(0.0, self.noise_std).expect("positive noise");
        let mut x = Matrix::zeros(d, n * t);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = rng.random_range(0..k);
            labels.push(y);
            for p in 0..t {
                // sequences carry the class signal on a random half of the tokens
                let signal = t == 1 || rng.random_bool(0.5);
                let mut v: Vec<f64> = (0..d)
                    .map(|j| if signal { self.means[y][j] } else { 0.0 } + noise.sample(rng))
                    .collect();
                if shifted {
                    let col = self.rotation.matmul_unchecked(&Matrix::column(&v));
                    v = col.as_slice().iter().zip(&self.offset).map(|(a, b)| a + b).collect();
                }
                for (j, val) in v.into_iter().enumerate() {
                    x.set(j, i * t + p, val);
                }
            }
        }
        Dataset { x, labels, seq_len: t, n_classes: k }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskBundle {
    pub spec: TaskSpec,
    pub pretrain: Dataset,
    pub train: Dataset,
    pub val: Dataset,
    pub test_id: Dataset,
    pub test_ood: Dataset,
    pub target: Generator,
}

fn random_direction(rng: &mut StreamRng, d: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Rotation by `theta` in the plane spanned by orthonormal `u`, `v`.
pub fn plane_rotation(u: &[f64], v: &[f64], theta: f64) -> Matrix {
    let d = u.len();
    let (c, s) = (theta.cos(), theta.sin());
    Matrix::from_fn(d, d, |i, j| {
        let id = f64::from(u8::from(i == j));
        id + (c - 1.0) * (u[i] * u[j] + v[i] * v[j]) + s * (v[i] * u[j] - u[i] * v[j])
    })
}

pub fn make_task(spec: &TaskSpec) -> Result<TaskBundle> {
    spec.validate()?;
    let d = spec.input_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let mut g = stream(spec.seed, "task-geometry");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| (0..d).map(|_| spec.class_sep * scale * normal.sample(&mut g)).collect())
        .collect();
    let source_means: Vec<Vec<f64>> = means
        .iter()
        .map(|m| m.iter().map(|v| v + spec.source_shift * scale * normal.sample(&mut g)).collect())
        .collect();
    let u = random_direction(&mut g, d);
    let w = random_direction(&mut g, d);
    let dot: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
    let mut v: Vec<f64> = w.iter().zip(&u).map(|(b, a)| b - dot * a).collect();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= nv);
    let rotation = plane_rotation(&u, &v, spec.rotation_deg.to_radians());
    let offset: Vec<f64> = random_direction(&mut g, d).into_iter().map(|x| x * spec.mean_shift).collect();

    let target = Generator { means, noise_std: spec.noise_std, seq_len: spec.seq_len, rotation, offset };
    let source = Generator { means: source_means, ..target.clone() };
    Ok(TaskBundle {
        spec: spec.clone(),
        pretrain: source.sample(spec.n_pretrain, false, &mut stream(spec.seed, "split-pretrain")),
        train: target.sample(spec.n_train, false, &mut stream(spec.seed, "split-train")),
        val: target.sample(spec.n_val, false, &mut stream(spec.seed, "split-val")),
        test_id: target.sample(spec.n_test, false, &mut stream(spec.seed, "split-test")),
        test_ood: target.sample(spec.n_test, true, &mut stream(spec.seed, "split-ood")),
        target,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mlp,
    Attention,
}

/// Frozen toy network. The MLP adapts `hidden` and `head`; the attention
/// block adapts `q_proj`, `k_proj` and `head`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    arch: Architecture,
    width: usize,
    n_classes: usize,
    weights: Vec<(String, Matrix)>,
}

impl ToyModel {
    pub fn new(arch: Architecture, input_dim: usize, width: usize, n_classes: usize, rng: &mut StreamRng) -> Self {
        let mut w = |rows: usize, cols: usize| {
            let normal = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).expect("valid std");
            Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
        };
        let weights = match arch {
            Architecture::Mlp => vec![
                ("hidden".to_string(), w(width, input_dim)),
                ("hidden_bias".to_string(), Matrix::zeros(width, 1)),
                ("head".to_string(), w(n_classes, width)),
                ("head_bias".to_string(), Matrix::zeros(n_classes, 1)),
            ],
            Architecture::Attention => vec![
                ("embed".to_string(), w(width, input_dim)),
                ("q_proj".to_string(), w(width, width)),
                ("k_proj".to_string(), w(width, width)),
                ("v_proj".to_string(), w(width, width)),
                ("head".to_string(), w(n_classes, width)),
                ("head_bias".to_string(), Matrix::zeros(n_classes, 1)),
            ],
        };
        Self { arch, width, n_classes, weights }
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn weight(&self, name: &str) -> Result<&Matrix> {
        self.weights
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::param(format!("no weight named {name}")))
    }

    pub fn weights(&self) -> &[(String, Matrix)] {
        &self.weights
    }

    fn adapted_names(&self) -> &'static [&'static str] {
        match self.arch {
            Architecture::Mlp => &["hidden", "head"],
            Architecture::Attention => &["q_proj", "k_proj", "head"],
        }
    }

    /// Shared forward. Adapted layers go through `adapters` when given,
    /// otherwise through their base weights (trainable when `train_base`).
    fn forward<'t>(
        &self,
        tape: &'t Tape,
        data: &Dataset,
        train_base: bool,
        adapters: Option<&DrawnAdapters<'t>>,
        sample: usize,
    ) -> Result<Var<'t>> {
        let var = |name: &str| -> Result<Var<'t>> { Ok(leaf(tape, join("base", name), self.weight(name)?, train_base)) };
        let linear = |name: &str, x: Var<'t>| -> Result<Var<'t>> {
            match adapters {
                Some(a) if self.adapted_names().contains(&name) => a.apply(name, sample, x),
                _ => var(name)?.matmul(&x),
            }
        };
        let x = tape.constant(data.x.clone());
        match self.arch {
            Architecture::Mlp => {
                let h = linear("hidden", x)?.add_col(&var("hidden_bias")?)?.tanh();
                linear("head", h)?.add_col(&var("head_bias")?)
            }
            Architecture::Attention => {
                let t = data.seq_len;
                let n = data.len();
                let h = var("embed")?.matmul(&x)?.tanh();
                let q = linear("q_proj", h)?;
                let k = linear("k_proj", h)?;
                let v = var("v_proj")?.matmul(&h)?;
                let z = h.add(&q.block_attention(&k, &v, t, 1.0 / (self.width as f64).sqrt())?)?;
                let pool = Matrix::from_fn(n * t, n, |i, j| if i / t == j { 1.0 / t as f64 } else { 0.0 });
                let pooled = z.matmul(&tape.constant(pool))?;
                linear("head", pooled)?.add_col(&var("head_bias")?)
            }
        }
    }

    /// Logits of the frozen network without adapters.
    pub fn base_logits(&self, data: &Dataset) -> Result<Matrix> {
        let tape = Tape::new();
        Ok(self.forward(&tape, data, false, None, 0)?.value().as_ref().clone())
    }

    pub fn base_accuracy(&self, data: &Dataset) -> Result<f64> {
        let logits = self.base_logits(data)?;
        let correct = (0..data.len())
            .filter(|&j| {
                let col = logits.col_vec(j);
                let pred = (0..col.len()).fold(0, |b, i| if col[i] > col[b] { i } else { b });
                pred == data.labels[j]
            })
            .count();
        Ok(correct as f64 / data.len() as f64)
    }
}

impl Backbone for ToyModel {
    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn adapted_layers(&self) -> Vec<(String, Matrix)> {
        self.adapted_names()
            .iter()
            .map(|n| (n.to_string(), self.weight(n).expect("adapted weight exists").clone()))
            .collect()
    }

    fn logits_var<'t>(&self, tape: &'t Tape, data: &Dataset, adapters: &DrawnAdapters<'t>, sample: usize) -> Result<Var<'t>> {
        self.forward(tape, data, false, Some(adapters), sample)
    }
}

impl Parameterized for ToyModel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        for (n, m) in &self.weights {
            f(&join(&join(prefix, "base"), n), m);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        for (n, m) in &mut self.weights {
            f(&join(&join(prefix, "base"), n), m);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub architecture: Architecture,
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub min_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Mlp,
            width: 32,
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-2,
            min_accuracy: 0.8,
        }
    }
}

/// Trains every base weight on the pretraining split and returns the
/// frozen network.
pub fn pretrain_base(task: &TaskBundle, cfg: &PretrainConfig, seed: u64) -> Result<ToyModel> {
    let data = &task.pretrain;
    let mut model = ToyModel::new(cfg.architecture, data.features(), cfg.width, data.n_classes, &mut stream(seed, "base-init"));
    let mut opt = AdamW::new((0.9, 0.999), 1e-8, 0.0);
    let mut rng = stream(seed, "base-shuffle");
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let batch = data.subset(idx);
            let tape = Tape::new();
            let logits = model.forward(&tape, &batch, true, None, 0)?;
            let targets = Matrix::from_fn(data.n_classes, batch.len(), |i, j| f64::from(u8::from(batch.labels[j] == i)));
            let loss = logits.cross_entropy(&targets)?;
            if !loss.item().is_finite() {
                return Err(Error::numeric(format!("pretraining diverged in epoch {}", epoch + 1)));
            }
            let grads: Gradients = tape.grad(loss)?;
            opt.step(&mut model, &grads, cfg.learning_rate);
        }
    }
    let acc = model.base_accuracy(data)?;
    if acc < cfg.min_accuracy {
        warn!("pretrained base reaches only {acc:.3} accuracy on its own split");
    }
    Ok(model)
}

/// One method of the grid with its evaluation sample count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub label: String,
    pub adapter: AdapterConfig,
    pub eval_samples: usize,
}

impl MethodSpec {
    pub fn map_lora() -> Self {
        Self { label: "map_lora".into(), adapter: AdapterConfig::map_lora(), eval_samples: 1 }
    }

    pub fn degenerate() -> Self {
        Self { label: "degenerate".into(), adapter: AdapterConfig::degenerate(), eval_samples: 1 }
    }

    pub fn bayes(flow_depth: usize, inducing: usize, eval_samples: usize) -> Self {
        Self {
            label: format!("bayes_lora_L{flow_depth}_r{inducing}_S{eval_samples}"),
            adapter: AdapterConfig::bayes(flow_depth, inducing),
            eval_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub method: String,
    pub seed: u64,
    pub split: String,
    pub acc: f64,
    pub ece: f64,
    pub nll: f64,
    pub brier: f64,
    pub trainable_params: usize,
    pub analytic_params: usize,
    pub train_time: f64,
    pub error: Option<String>,
}

impl GridRow {
    pub const CSV_HEADER: &'static str = "method,seed,split,acc,ece,nll,brier,trainable_params,analytic_params,train_time,error";

    pub fn csv_row(&self) -> String {
        format!(
            "\"{}\",{},{},{},{},{},{},{},{},{},{}",
            self.method,
            self.seed,
            self.split,
            self.acc,
            self.ece,
            self.nll,
            self.brier,
            self.trainable_params,
            self.analytic_params,
            self.train_time,
            self.error.as_deref().unwrap_or("").replace(',', ";")
        )
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub rows: Vec<GridRow>,
    pub adapters: Option<AdapterSet>,
}

/// Fine-tunes one method on one seed and evaluates it on the ID and OOD
/// test splits.
pub fn run_cell(task: &TaskBundle, base: &ToyModel, method: &MethodSpec, seed: u64, train_cfg: &TrainConfig) -> CellResult {
    let analytic = AdapterSet::analytic_parameter_count(base, &method.adapter);
    let fail = |e: Error| CellResult {
        rows: ["id", "ood"]
            .iter()
            .map(|split| GridRow {
                method: method.label.clone(),
                seed,
                split: split.to_string(),
                acc: f64::NAN,
                ece: f64::NAN,
                nll: f64::NAN,
                brier: f64::NAN,
                trainable_params: 0,
                analytic_params: analytic,
                train_time: f64::NAN,
                error: Some(e.to_string()),
            })
            .collect(),
        adapters: None,
    };
    let run = || -> Result<CellResult> {
        let adapters = AdapterSet::build(base, &method.adapter, &mut stream(seed, &format!("adapters/{}", method.label)))?;
        let trainable = adapters.parameter_count();
        let cfg = TrainConfig { seed, ..train_cfg.clone() };
        let start = Instant::now();
        let outcome = train(base, adapters, &task.train, &task.val, &cfg, |_| {})?;
        let train_time = start.elapsed().as_secs_f64();
        let mut rows = Vec::new();
        for (split, data) in [("id", &task.test_id), ("ood", &task.test_ood)] {
            let r = evaluate(base, &outcome.adapters, data, method.eval_samples, cfg.eval_batch_size, seed ^ 0x5eed)?;
            rows.push(GridRow {
                method: method.label.clone(),
                seed,
                split: split.to_string(),
                acc: r.acc,
                ece: r.ece,
                nll: r.nll,
                brier: r.brier,
                trainable_params: trainable,
                analytic_params: analytic,
                train_time,
                error: outcome.diverged.clone(),
            });
        }
        Ok(CellResult { rows, adapters: Some(outcome.adapters) })
    };
    run().unwrap_or_else(fail)
}

/// Adapter fine-tuning step size on the toy tasks.
pub const TOY_LEARNING_RATE: f64 = 2e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub task: TaskSpec,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub parallel: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig { learning_rate: TOY_LEARNING_RATE, ..TrainConfig::default() },
            parallel: true,
        }
    }
}

/// Runs every `(method, seed)` cell. Each seed has its own task draw and
/// pretrained base shared by all methods; failed cells are recorded and
/// the grid continues.
pub fn run_grid(cfg: &GridConfig, methods: &[MethodSpec], seeds: &[u64]) -> Result<Vec<GridRow>> {
    let prepared = seeds
        .iter()
        .map(|&seed| {
            let task = make_task(&TaskSpec { seed, ..cfg.task.clone() })?;
            let base = pretrain_base(&task, &cfg.pretrain, seed)?;
            Ok((seed, task, base))
        })
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, usize)> = (0..prepared.len())
        .flat_map(|s| (0..methods.len()).map(move |m| (s, m)))
        .collect();
    let run = |&(s, m): &(usize, usize)| {
        let (seed, task, base) = &prepared[s];
        run_cell(task, base, &methods[m], *seed, &cfg.train).rows
    };
    let rows: Vec<Vec<GridRow>> = if cfg.parallel {
        cells.par_iter().map(run).collect()
    } else {
        cells.iter().map(run).collect()
    };
    Ok(rows.into_iter().flatten().collect())
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut out = String::from(GridRow::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub split: String,
    pub n: usize,
    pub acc: (f64, f64),
    pub ece: (f64, f64),
    pub nll: (f64, f64),
    pub median_acc: f64,
    pub median_ece: f64,
    pub median_nll: f64,
}

/// Mean ± std and medians per `(method, split)`.
pub fn summarize(rows: &[GridRow]) -> Vec<Summary> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let k = (r.method.clone(), r.split.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(method, split)| {
            let sel: Vec<&GridRow> = rows
                .iter()
                .filter(|r| r.method == method && r.split == split && r.error.is_none())
                .collect();
            let col = |f: fn(&GridRow) -> f64| sel.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (acc, ece, nll) = (col(|r| r.acc), col(|r| r.ece), col(|r| r.nll));
            Summary {
                n: sel.len(),
                acc: mean_std(&acc),
                ece: mean_std(&ece),
                nll: mean_std(&nll),
                median_acc: median(&acc),
                median_ece: median(&ece),
                median_nll: median(&nll),
                method,
                split,
            }
        })
        .collect()
}

/// Looks up the metric row for a cell.
pub fn find_row<'a>(rows: &'a [GridRow], method: &str, seed: u64, split: &str) -> Option<&'a GridRow> {
    rows.iter().find(|r| r.method == method && r.seed == seed && r.split == split)
}

/// Tolerated accuracy drop below the MAP baseline during tuning.
pub const ACCURACY_SLACK: f64 = 0.02;

/// Validation-split objectives `(ECE, NLL, −ACC)` and the accuracy-floor
/// constraint `(map_acc − slack) − acc` of one `(lr, wd)` setting.
pub fn tuning_observation(
    task: &TaskBundle,
    base: &ToyModel,
    method: &MethodSpec,
    seed: u64,
    train_cfg: &TrainConfig,
    map_val_acc: f64,
    x: &[f64],
) -> Result<Observation> {
    let (learning_rate, weight_decay) = hyperparameters(x);
    let cfg = TrainConfig { learning_rate, weight_decay, seed, ..train_cfg.clone() };
    let adapters = AdapterSet::build(base, &method.adapter, &mut stream(seed, &format!("adapters/{}", method.label)))?;
    let outcome = train(base, adapters, &task.train, &task.val, &cfg, |_| {})?;
    if let Some(reason) = outcome.diverged {
        return Err(Error::numeric(format!("training diverged: {reason}")));
    }
    let r = evaluate(base, &outcome.adapters, &task.val, method.eval_samples, cfg.eval_batch_size, seed ^ 0x5eed)?;
    Ok(Observation {
        objectives: vec![r.ece, r.nll, -r.acc],
        constraints: vec![(map_val_acc - ACCURACY_SLACK) - r.acc],
    })
}

/// Tunes `(lr, wd)` of `method` by constrained BO on the validation split.
/// The accuracy floor comes from a MAP-LoRA run at `train_cfg`.
pub fn tune_adapter(
    task: &TaskBundle,
    base: &ToyModel,
    method: &MethodSpec,
    seed: u64,
    train_cfg: &TrainConfig,
    cbo: &CboConfig,
) -> Result<ParetoArchive> {
    let map = MethodSpec::map_lora();
    let cfg = TrainConfig { seed, ..train_cfg.clone() };
    let adapters = AdapterSet::build(base, &map.adapter, &mut stream(seed, "adapters/map-reference"))?;
    let outcome = train(base, adapters, &task.train, &task.val, &cfg, |_| {})?;
    let map_acc = evaluate(base, &outcome.adapters, &task.val, 1, cfg.eval_batch_size, seed ^ 0x5eed)?.acc;
    let space = SearchSpace::learning_rate_weight_decay();
    run_cbo(&space, &ADAPTER_OBJECTIVES, cbo, |x| tuning_observation(task, base, method, seed, train_cfg, map_acc, x))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> TaskSpec {
        TaskSpec { n_pretrain: 400, n_train: 200, n_val: 100, n_test: 200, seed, ..TaskSpec::default() }
    }

    #[test]
    fn task_is_seeded_and_sized() {
        let a = make_task(&small_spec(3)).unwrap();
        let b = make_task(&small_spec(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 200);
        assert_eq!(a.test_ood.len(), 200);
        assert_eq!(a.train.features(), 16);
        assert_ne!(make_task(&small_spec(4)).unwrap().train, a.train);
    }

    #[test]
    fn zero_shift_keeps_generator() {
        let spec = TaskSpec { rotation_deg: 0.0, mean_shift: 0.0, ..small_spec(5) };
        let t = make_task(&spec).unwrap();
        assert!(t.target.rotation.max_abs_diff(&Matrix::identity(16)) < 1e-15);
        assert!(t.target.offset.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rotation_is_orthogonal_with_angle() {
        let t = make_task(&small_spec(6)).unwrap();
        let r = &t.target.rotation;
        assert!(r.t_matmul(r).max_abs_diff(&Matrix::identity(16)) < 1e-12);
        // a 30° plane rotation has trace d − 2 + 2 cos 30°
        assert!((r.trace() - (14.0 + 2.0 * 30f64.to_radians().cos())).abs() < 1e-12);
        let norm: f64 = t.target.offset.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn class_priors_are_uniform() {
        let spec = TaskSpec { n_train: 10_000, ..small_spec(7) };
        let t = make_task(&spec).unwrap();
        let n = t.train.len() as f64;
        let se = (0.25 * 0.75 / n).sqrt();
        for c in 0..4 {
            let f = t.train.labels.iter().filter(|&&y| y == c).count() as f64 / n;
            assert!((f - 0.25).abs() < 3.0 * se, "class {c}: {f}");
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        assert!(make_task(&TaskSpec { n_train: 0, ..TaskSpec::default() }).is_err());
        assert!(make_task(&TaskSpec { n_classes: 1, ..TaskSpec::default() }).is_err());
    }

    #[test]
    fn median_and_summary() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
    }
}
