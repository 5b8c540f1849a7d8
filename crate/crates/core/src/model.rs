//! Frozen backbones with named adapter slots, and the adapter sets that
//! fill them.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{lambda_var, BayesLoraLayer, DrawnAdapter, LayerConfig, LayerNoise, LoraLayer};
use crate::linalg::Matrix;
use crate::metrics::{average_probs, PredictionBatch};
use crate::params::{join, Parameterized};
use crate::posterior::{conditional_kl, conditional_kl_var, Lambda};
use crate::tape::{Tape, Var};

/// Labelled examples. `x` holds one column per token, `seq_len` tokens per
/// example, so an example occupies `seq_len` consecutive columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub seq_len: usize,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(x: Matrix, labels: Vec<usize>, seq_len: usize, n_classes: usize) -> Result<Self> {
        if seq_len == 0 || x.cols() != labels.len() * seq_len {
            return Err(Error::dim(
                "Dataset::new",
                format!("{} columns for {} examples of length {seq_len}", x.cols(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::param(format!("label {bad} out of range for {n_classes} classes")));
        }
        Ok(Self { x, labels, seq_len, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.x.rows()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let t = self.seq_len;
        let mut data = Vec::with_capacity(self.x.rows() * indices.len() * t);
        for r in 0..self.x.rows() {
            let row = self.x.row(r);
            for &i in indices {
                data.extend_from_slice(&row[i * t..(i + 1) * t]);
            }
        }
        Dataset {
            x: Matrix::from_vec(self.x.rows(), indices.len() * t, data),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            seq_len: t,
            n_classes: self.n_classes,
        }
    }

    /// Consecutive chunks of at most `size` examples.
    pub fn chunks(&self, size: usize) -> Vec<Dataset> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(size.max(1)).map(|c| self.subset(c)).collect()
    }
}

/// A frozen network exposing named linear layers that accept adapters.
pub trait Backbone {
    fn n_classes(&self) -> usize;

    /// Names and frozen weights of the adapted layers.
    fn adapted_layers(&self) -> Vec<(String, Matrix)>;

    /// Logits `k × n` for the examples in `data`, using adapter sample
    /// `sample` for every adapted layer.
    fn logits_var<'t>(&self, tape: &'t Tape, data: &Dataset, adapters: &DrawnAdapters<'t>, sample: usize) -> Result<Var<'t>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    MapLora,
    BayesLora,
    Degenerate,
}

impl MethodKind {
    pub fn label(&self) -> &'static str {
        match self {
            MethodKind::MapLora => "map_lora",
            MethodKind::BayesLora => "bayes_lora",
            MethodKind::Degenerate => "degenerate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub method: MethodKind,
    pub layer: LayerConfig,
    pub init_lambda: f64,
    pub max_lambda: f64,
    pub learn_lambda: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            method: MethodKind::BayesLora,
            layer: LayerConfig::default(),
            init_lambda: 0.001,
            max_lambda: 0.03,
            learn_lambda: true,
        }
    }
}

impl AdapterConfig {
    pub fn map_lora() -> Self {
        Self { method: MethodKind::MapLora, ..Self::default() }
    }

    pub fn bayes(flow_depth: usize, inducing: usize) -> Self {
        let mut cfg = Self::default();
        cfg.layer.flow_depth = flow_depth;
        cfg.layer.inducing_rows = inducing;
        cfg.layer.inducing_cols = inducing;
        cfg
    }

    /// Point-mass posterior, no flow, λ fixed at `1e-4`.
    pub fn degenerate() -> Self {
        Self {
            method: MethodKind::Degenerate,
            layer: LayerConfig::degenerate(),
            init_lambda: 1e-4,
            max_lambda: 1e-4,
            learn_lambda: false,
        }
    }

    fn lambda(&self) -> Result<Lambda> {
        if self.learn_lambda && self.init_lambda < self.max_lambda {
            Lambda::learned(self.init_lambda, self.max_lambda)
        } else {
            Lambda::fixed(self.init_lambda.min(self.max_lambda))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    Bayes(BayesLoraLayer),
    Lora(LoraLayer),
}

/// One adapter per adapted backbone layer plus the shared λ.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    adapters: Vec<(String, Adapter)>,
    lambda: Option<Lambda>,
}

pub type AdapterNoise = Vec<Option<LayerNoise>>;

impl AdapterSet {
    pub fn build<B: Backbone + ?Sized, R: Rng + ?Sized>(backbone: &B, cfg: &AdapterConfig, rng: &mut R) -> Result<Self> {
        let mut adapters = Vec::new();
        for (name, w) in backbone.adapted_layers() {
            let adapter = match cfg.method {
                MethodKind::MapLora => Adapter::Lora(LoraLayer::new(w, cfg.layer.lora_rank, cfg.layer.alpha, rng)?),
                MethodKind::BayesLora | MethodKind::Degenerate => Adapter::Bayes(BayesLoraLayer::new(w, &cfg.layer, rng)?),
            };
            adapters.push((name, adapter));
        }
        let lambda = match cfg.method {
            MethodKind::MapLora => None,
            _ => Some(cfg.lambda()?),
        };
        Ok(Self { adapters, lambda })
    }

    pub fn from_parts(adapters: Vec<(String, Adapter)>, lambda: Option<Lambda>) -> Self {
        Self { adapters, lambda }
    }

    pub fn adapters(&self) -> &[(String, Adapter)] {
        &self.adapters
    }

    pub fn lambda(&self) -> Option<&Lambda> {
        self.lambda.as_ref()
    }

    pub fn lambda_value(&self) -> f64 {
        self.lambda.as_ref().map_or(0.0, Lambda::value)
    }

    pub fn is_stochastic(&self) -> bool {
        self.adapters.iter().any(|(_, a)| matches!(a, Adapter::Bayes(_)))
    }

    /// Total number of adapted weight entries (the conditional-KL `D`).
    pub fn weight_count(&self) -> usize {
        self.adapters
            .iter()
            .map(|(_, a)| match a {
                Adapter::Bayes(l) => l.weight_count(),
                Adapter::Lora(_) => 0,
            })
            .sum()
    }

    pub fn conditional_kl(&self) -> Result<f64> {
        match &self.lambda {
            Some(l) => conditional_kl(l.value(), self.weight_count()),
            None => Ok(0.0),
        }
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> AdapterNoise {
        self.adapters
            .iter()
            .map(|(_, a)| match a {
                Adapter::Bayes(l) => Some(l.draw_noise(s, rng)),
                Adapter::Lora(_) => None,
            })
            .collect()
    }

    pub fn draw_var<'t>(&self, tape: &'t Tape, trainable: bool, noise: &AdapterNoise) -> Result<DrawnAdapters<'t>> {
        if noise.len() != self.adapters.len() {
            return Err(Error::dim("AdapterSet::draw_var", "noise does not cover every adapter"));
        }
        let lambda = self.lambda.as_ref().map(|l| lambda_var(l, tape, trainable));
        let mut map = BTreeMap::new();
        let mut kl_u = tape.scalar(0.0);
        let mut samples = 1;
        for ((name, adapter), n) in self.adapters.iter().zip(noise) {
            let prefix = join("adapters", name);
            let drawn = match (adapter, n, lambda) {
                (Adapter::Bayes(l), Some(n), Some(lv)) => {
                    let (drawn, kl) = l.draw_var(tape, &prefix, trainable, lv, n)?;
                    kl_u = kl_u.add(&kl)?;
                    samples = n.samples();
                    drawn
                }
                (Adapter::Lora(l), None, _) => l.draw_var(tape, &prefix, trainable),
                _ => return Err(Error::param(format!("noise or lambda missing for adapter {name}"))),
            };
            map.insert(name.clone(), drawn);
        }
        let kl_w = match lambda {
            Some(lv) => conditional_kl_var(lv, self.weight_count()),
            None => tape.scalar(0.0),
        };
        Ok(DrawnAdapters { map, kl_u, kl_w, samples })
    }

    /// Trainable tensor total, including λ when it is learned.
    pub fn analytic_parameter_count<B: Backbone + ?Sized>(backbone: &B, cfg: &AdapterConfig) -> usize {
        let layers: usize = backbone
            .adapted_layers()
            .iter()
            .map(|(_, w)| match cfg.method {
                MethodKind::MapLora => LoraLayer::analytic_parameter_count(w.rows(), w.cols(), cfg.layer.lora_rank),
                _ => BayesLoraLayer::analytic_parameter_count(w.rows(), w.cols(), &cfg.layer),
            })
            .sum();
        let lambda = usize::from(cfg.method != MethodKind::MapLora && cfg.learn_lambda && cfg.init_lambda < cfg.max_lambda);
        layers + lambda
    }
}

impl Parameterized for AdapterSet {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        for (name, adapter) in &self.adapters {
            let p = join(&join(prefix, "adapters"), name);
            match adapter {
                Adapter::Bayes(l) => l.visit_params(&p, f),
                Adapter::Lora(l) => l.visit_params(&p, f),
            }
        }
        if let Some(Lambda::Learned { raw, .. }) = &self.lambda {
            f(&join(prefix, "lambda.raw"), &Matrix::scalar(*raw));
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        for (name, adapter) in &mut self.adapters {
            let p = join(&join(prefix, "adapters"), name);
            match adapter {
                Adapter::Bayes(l) => l.visit_params_mut(&p, f),
                Adapter::Lora(l) => l.visit_params_mut(&p, f),
            }
        }
        if let Some(raw) = self.lambda.as_mut().and_then(Lambda::raw_mut) {
            let mut m = Matrix::scalar(*raw);
            f(&join(prefix, "lambda.raw"), &mut m);
            *raw = m.get(0, 0);
        }
    }
}

/// The adapters of one step on the tape together with the KL nodes.
pub struct DrawnAdapters<'t> {
    map: BTreeMap<String, DrawnAdapter<'t>>,
    pub kl_u: Var<'t>,
    pub kl_w: Var<'t>,
    samples: usize,
}

impl<'t> DrawnAdapters<'t> {
    pub fn get(&self, name: &str) -> Result<&DrawnAdapter<'t>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::param(format!("no adapter for layer {name}")))
    }

    /// Applies the named adapter, or the frozen weight when none is attached.
    pub fn apply(&self, name: &str, sample: usize, x: Var<'t>) -> Result<Var<'t>> {
        self.get(name)?.apply(sample, x)
    }

    pub fn samples(&self) -> usize {
        self.samples
    }
}

fn softmax_columns(logits: &Matrix) -> Vec<Vec<f64>> {
    (0..logits.cols())
        .map(|j| {
            let col = logits.col_vec(j);
            let mx = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = col.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        })
        .collect()
}

/// Predictive distribution averaged over `s` adapter samples, evaluated in
/// chunks of `batch_size` examples with fresh samples per chunk.
pub fn predict<B: Backbone + ?Sized, R: Rng + ?Sized>(
    backbone: &B,
    adapters: &AdapterSet,
    data: &Dataset,
    s: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<PredictionBatch> {
    if s == 0 {
        return Err(Error::param("at least one predictive sample is required"));
    }
    let s = if adapters.is_stochastic() { s } else { 1 };
    let mut probs = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size) {
        let noise = adapters.draw_noise(s, rng);
        let tape = Tape::new();
        let drawn = adapters.draw_var(&tape, false, &noise)?;
        let per_sample = (0..s)
            .map(|k| Ok(softmax_columns(&backbone.logits_var(&tape, &chunk, &drawn, k)?.value())))
            .collect::<Result<Vec<_>>>()?;
        probs.extend(average_probs(&per_sample)?);
    }
    PredictionBatch::new(probs, data.labels.clone())
}
