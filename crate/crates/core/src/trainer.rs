//! ELBO objective, AdamW optimization and validation-NLL model selection.

use std::collections::BTreeMap;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::CalibrationReport;
use crate::model::{predict, AdapterNoise, AdapterSet, Backbone, Dataset};
use crate::params::Parameterized;
use crate::rng::stream;
use crate::tape::{Gradients, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
    pub epochs: usize,
    pub train_batch_size: usize,
    pub eval_batch_size: usize,
    pub mc_train_samples: usize,
    pub eval_samples: usize,
    pub label_smoothing: f64,
    pub eval_every: usize,
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    /// Numerator of the per-step KL weight `kl_scale / steps_per_epoch`.
    pub kl_scale: f64,
    /// Linear warm-up of the KL weight over this many epochs; 0 disables it.
    pub kl_ramp_epochs: usize,
    pub scale_kl_w: bool,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            weight_decay: 0.1,
            betas: (0.9, 0.999),
            epsilon: 1e-5,
            epochs: 10,
            train_batch_size: 16,
            eval_batch_size: 32,
            mc_train_samples: 1,
            eval_samples: 2,
            label_smoothing: 0.1,
            eval_every: 2,
            lr_milestones: vec![4, 6],
            lr_gamma: 0.1,
            kl_scale: 0.2,
            kl_ramp_epochs: 0,
            scale_kl_w: true,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_train_samples == 0 || self.eval_samples == 0 {
            return Err(Error::param("Monte-Carlo sample counts must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::param(format!("label smoothing must lie in [0, 1), got {}", self.label_smoothing)));
        }
        if self.train_batch_size == 0 || self.eval_batch_size == 0 || self.eval_every == 0 {
            return Err(Error::param("batch sizes and eval_every must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || !(self.epsilon > 0.0) {
            return Err(Error::param("learning rate and epsilon must be positive, weight decay nonnegative"));
        }
        Ok(())
    }

    /// Learning rate in effect during zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.learning_rate * self.lr_gamma.powi(passed as i32)
    }
}

/// KL weight per optimization step.
pub fn kl_scale(numerator: f64, steps_per_epoch: usize) -> Result<f64> {
    if steps_per_epoch == 0 {
        return Err(Error::param("steps_per_epoch must be at least 1"));
    }
    Ok(numerator / steps_per_epoch as f64)
}

/// `(1 − ε)` on the gold class plus `ε/k` everywhere.
pub fn smoothed_targets(label: usize, k: usize, eps: f64) -> Result<Vec<f64>> {
    if label >= k {
        return Err(Error::param(format!("label {label} out of range for {k} classes")));
    }
    let mut t = vec![eps / k as f64; k];
    t[label] += 1.0 - eps;
    Ok(t)
}

fn target_matrix(labels: &[usize], k: usize, eps: f64) -> Result<Matrix> {
    let mut t = Matrix::zeros(k, labels.len());
    for (j, &y) in labels.iter().enumerate() {
        for (i, v) in smoothed_targets(y, k, eps)?.into_iter().enumerate() {
            t.set(i, j, v);
        }
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub data_term: f64,
    pub kl_u: f64,
    pub kl_w: f64,
    pub elbo: f64,
    pub kl_scale: f64,
    pub n_mc: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSettings {
    pub kl_scale: f64,
    pub label_smoothing: f64,
    pub scale_kl_w: bool,
}

/// One ELBO evaluation with fixed noise. Returns the breakdown and the
/// gradients of the loss `−ELBO`.
pub fn elbo_step_with_noise<B: Backbone + ?Sized>(
    backbone: &B,
    adapters: &AdapterSet,
    batch: &Dataset,
    settings: &StepSettings,
    noise: &AdapterNoise,
) -> Result<(ElboBreakdown, Gradients)> {
    if batch.is_empty() {
        return Err(Error::param("empty batch"));
    }
    let tape = Tape::new();
    let drawn = adapters.draw_var(&tape, true, noise)?;
    let s = drawn.samples();
    let targets = target_matrix(&batch.labels, backbone.n_classes(), settings.label_smoothing)?;
    let mut nll = tape.scalar(0.0);
    for k in 0..s {
        let ce = backbone.logits_var(&tape, batch, &drawn, k)?.cross_entropy(&targets)?;
        nll = nll.add(&ce)?;
    }
    let nll = nll.scale(1.0 / s as f64);
    let kl_w_weight = if settings.scale_kl_w { settings.kl_scale } else { 1.0 };
    let loss = nll
        .add(&drawn.kl_u.scale(settings.kl_scale))?
        .add(&drawn.kl_w.scale(kl_w_weight))?;
    let data_term = -nll.item();
    let kl_u = drawn.kl_u.item();
    let kl_w = drawn.kl_w.item();
    for (name, v) in [("data term", data_term), ("kl_u", kl_u), ("kl_w", kl_w)] {
        if !v.is_finite() {
            return Err(Error::numeric(format!("non-finite {name}: {v}")));
        }
    }
    let elbo = data_term - settings.kl_scale * kl_u - kl_w_weight * kl_w;
    let grads = tape.grad(loss)?;
    Ok((
        ElboBreakdown { data_term, kl_u, kl_w, elbo, kl_scale: settings.kl_scale, n_mc: s },
        grads,
    ))
}

pub fn elbo_step<B: Backbone + ?Sized, R: Rng + ?Sized>(
    backbone: &B,
    adapters: &AdapterSet,
    batch: &Dataset,
    settings: &StepSettings,
    samples: usize,
    rng: &mut R,
) -> Result<(ElboBreakdown, Gradients)> {
    let noise = adapters.draw_noise(samples, rng);
    elbo_step_with_noise(backbone, adapters, batch, settings, &noise)
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
    t: i32,
    moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl AdamW {
    pub fn new(betas: (f64, f64), epsilon: f64, weight_decay: f64) -> Self {
        Self { beta1: betas.0, beta2: betas.1, epsilon, weight_decay, t: 0, moments: BTreeMap::new() }
    }

    pub fn step<P: Parameterized + ?Sized>(&mut self, params: &mut P, grads: &Gradients, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (eps, wd) = (self.epsilon, self.weight_decay);
        let moments = &mut self.moments;
        params.visit_params_mut("", &mut |name, p| {
            let Some(g) = grads.get(name) else { return };
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (Matrix::zeros(p.rows(), p.cols()), Matrix::zeros(p.rows(), p.cols())));
            let (pm, gm) = (p.as_mut_slice(), g.as_slice());
            for (((pi, gi), mi), vi) in pm.iter_mut().zip(gm).zip(m.as_mut_slice()).zip(v.as_mut_slice()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= lr * wd * *pi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub steps: usize,
    /// Mean of the per-step breakdowns.
    pub elbo: ElboBreakdown,
    pub lambda: f64,
    pub val: Option<CalibrationReport>,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub adapters: AdapterSet,
    pub history: Vec<EpochRecord>,
    pub initial_val_nll: f64,
    pub best_val_nll: f64,
    /// Epoch of the selected checkpoint; 0 means the initial parameters.
    pub best_epoch: usize,
    pub diverged: Option<String>,
    pub train_time: f64,
}

pub fn evaluate<B: Backbone + ?Sized>(
    backbone: &B,
    adapters: &AdapterSet,
    data: &Dataset,
    samples: usize,
    batch_size: usize,
    seed: u64,
) -> Result<CalibrationReport> {
    let mut rng = stream(seed, "eval");
    CalibrationReport::compute(&predict(backbone, adapters, data, samples, batch_size, &mut rng)?)
}

/// Runs the configured epochs and returns the adapters with the lowest
/// validation NLL.
pub fn train<B: Backbone + ?Sized>(
    backbone: &B,
    adapters: AdapterSet,
    train_data: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::param("empty training set"));
    }
    let start = Instant::now();
    let steps_per_epoch = train_data.len().div_ceil(cfg.train_batch_size);
    let base_kl = kl_scale(cfg.kl_scale, steps_per_epoch)?;
    let mut shuffle_rng = stream(cfg.seed, "shuffle");
    let mut noise_rng = stream(cfg.seed, "train-noise");
    let mut opt = AdamW::new(cfg.betas, cfg.epsilon, cfg.weight_decay);

    let initial = evaluate(backbone, &adapters, val, cfg.eval_samples, cfg.eval_batch_size, cfg.seed)?;
    let mut best = adapters.clone();
    let mut best_nll = initial.nll;
    let mut best_epoch = 0;
    let mut current = adapters;
    let mut history = Vec::new();
    let mut diverged = None;
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    'epochs: for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let lr = cfg.lr_at(epoch);
        let ramp = if cfg.kl_ramp_epochs > 0 {
            ((epoch + 1) as f64 / cfg.kl_ramp_epochs as f64).min(1.0)
        } else {
            1.0
        };
        let settings = StepSettings {
            kl_scale: base_kl * ramp,
            label_smoothing: cfg.label_smoothing,
            scale_kl_w: cfg.scale_kl_w,
        };
        order.shuffle(&mut shuffle_rng);
        let mut sum = ElboBreakdown { data_term: 0.0, kl_u: 0.0, kl_w: 0.0, elbo: 0.0, kl_scale: settings.kl_scale, n_mc: cfg.mc_train_samples };
        let mut steps = 0;
        for idx in order.chunks(cfg.train_batch_size) {
            let batch = train_data.subset(idx);
            let step = elbo_step(backbone, &current, &batch, &settings, cfg.mc_train_samples, &mut noise_rng);
            let (br, mut grads) = match step {
                Ok(v) => v,
                Err(e) => {
                    warn!("training diverged in epoch {}: {e}", epoch + 1);
                    diverged = Some(e.to_string());
                    break 'epochs;
                }
            };
            let norm = grads.global_norm();
            if !norm.is_finite() {
                diverged = Some(format!("non-finite gradient norm in epoch {}", epoch + 1));
                break 'epochs;
            }
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                grads.scale_all(cfg.grad_clip / norm);
            }
            opt.step(&mut current, &grads, lr);
            sum.data_term += br.data_term;
            sum.kl_u += br.kl_u;
            sum.kl_w += br.kl_w;
            sum.elbo += br.elbo;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let mean = ElboBreakdown {
            data_term: sum.data_term / n,
            kl_u: sum.kl_u / n,
            kl_w: sum.kl_w / n,
            elbo: sum.elbo / n,
            ..sum
        };
        let e = epoch + 1;
        let val_report = if e % cfg.eval_every == 0 || e == cfg.epochs {
            let r = evaluate(backbone, &current, val, cfg.eval_samples, cfg.eval_batch_size, cfg.seed)?;
            if r.nll.is_finite() && r.nll < best_nll {
                best_nll = r.nll;
                best = current.clone();
                best_epoch = e;
            }
            Some(r)
        } else {
            None
        };
        let record = EpochRecord {
            epoch: e,
            learning_rate: lr,
            steps,
            elbo: mean,
            lambda: current.lambda_value(),
            val: val_report,
            wall_time: epoch_start.elapsed().as_secs_f64(),
        };
        info!("epoch {e}: elbo {:.5} data {:.5}", mean.elbo, mean.data_term);
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome {
        adapters: best,
        history,
        initial_val_nll: initial.nll,
        best_val_nll: best_nll,
        best_epoch,
        diverged,
        train_time: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothed_target_cases() {
        assert_eq!(smoothed_targets(2, 4, 0.0).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        let t = smoothed_targets(0, 4, 0.1).unwrap();
        let expected = [0.925, 0.025, 0.025, 0.025];
        for (a, b) in t.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(smoothed_targets(4, 4, 0.1).is_err());
        for k in 1..10 {
            for eps in [0.0, 0.05, 0.3, 0.99] {
                assert!((smoothed_targets(0, k, eps).unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kl_scale_cases() {
        assert!((kl_scale(0.2, 100).unwrap() - 0.002).abs() < 1e-18);
        assert_eq!(kl_scale(0.2, 1).unwrap(), 0.2);
        assert!(kl_scale(0.2, 0).is_err());
        let mut prev = f64::INFINITY;
        for n in 1..200 {
            let v = kl_scale(0.2, n).unwrap();
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 5e-4);
        assert_eq!(cfg.lr_at(3), 5e-4);
        assert!((cfg.lr_at(4) - 5e-5).abs() < 1e-18);
        assert!((cfg.lr_at(6) - 5e-6).abs() < 1e-18);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        struct P(Matrix);
        impl Parameterized for P {
            fn visit_params(&self, _: &str, f: &mut dyn FnMut(&str, &Matrix)) {
                f("w", &self.0);
            }
            fn visit_params_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
                f("w", &mut self.0);
            }
        }
        let tape = Tape::new();
        let w = tape.param("w", &Matrix::column(&[1.0, -2.0]));
        let grads = tape.grad(w.square().sum()).unwrap();
        let mut p = P(Matrix::column(&[1.0, -2.0]));
        let mut opt = AdamW::new((0.9, 0.999), 1e-12, 0.0);
        opt.step(&mut p, &grads, 0.1);
        assert!((p.0.get(0, 0) - 0.9).abs() < 1e-9);
        assert!((p.0.get(1, 0) + 1.9).abs() < 1e-9);
    }
}
