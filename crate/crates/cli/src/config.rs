//! Run configuration: a TOML file with flat sections, every key optional
//! except `mode`, unknown keys rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bayeslora::hpo::CboConfig;
use bayeslora::model::{AdapterConfig, MethodKind};
use bayeslora::toybench::{MethodSpec, PretrainConfig, TaskSpec, TOY_LEARNING_RATE};
use bayeslora::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Eval,
    SweepSamples,
    Hpo,
    MapRecovery,
    AblateFlow,
    AblateRank,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Train,
        Mode::Eval,
        Mode::SweepSamples,
        Mode::Hpo,
        Mode::MapRecovery,
        Mode::AblateFlow,
        Mode::AblateRank,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Eval => "eval",
            Mode::SweepSamples => "sweep-samples",
            Mode::Hpo => "hpo",
            Mode::MapRecovery => "map-recovery",
            Mode::AblateFlow => "ablate-flow",
            Mode::AblateRank => "ablate-rank",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}`; expected one of {}", Mode::ALL.map(|m| m.name()).join(", ")))
    }
}

/// Adapter family trained by `train`, `eval`, `sweep-samples` and `hpo`,
/// and the Bayesian arm of `map-recovery`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub kind: MethodKind,
    pub flow_depth: usize,
    pub inducing_dim: usize,
    pub eval_samples: usize,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self { kind: MethodKind::BayesLora, flow_depth: 1, inducing_dim: 9, eval_samples: 4 }
    }
}

impl MethodConfig {
    pub fn spec(&self) -> MethodSpec {
        match self.kind {
            MethodKind::MapLora => MethodSpec::map_lora(),
            MethodKind::Degenerate => MethodSpec::degenerate(),
            MethodKind::BayesLora => MethodSpec::bayes(self.flow_depth, self.inducing_dim, self.eval_samples),
        }
    }

    pub fn adapter(&self) -> AdapterConfig {
        self.spec().adapter
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub samples: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { samples: (1..=10).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub flow_depths: Vec<usize>,
    pub inducing_dims: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { flow_depths: vec![0, 1, 2, 4], inducing_dims: vec![4, 9, 16] }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn toy_train() -> TrainConfig {
    TrainConfig { learning_rate: TOY_LEARNING_RATE, ..TrainConfig::default() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Option<Mode>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    /// Checkpoint read by `eval`.
    pub checkpoint: Option<PathBuf>,
    /// Fan grid cells out over worker threads.
    #[serde(default)]
    pub parallel: bool,
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub method: MethodConfig,
    #[serde(default = "toy_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub hpo: CboConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: None,
            seeds: default_seeds(),
            out: None,
            checkpoint: None,
            parallel: false,
            task: TaskSpec::default(),
            pretrain: PretrainConfig::default(),
            method: MethodConfig::default(),
            train: toy_train(),
            hpo: CboConfig::default(),
            sweep: SweepConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(vec![e.message().to_string() + &span_hint(text, e.span())]))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(vec![format!("config: cannot read {}: {e}", path.display())]))?;
        Self::parse(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(m) = o.mode {
            self.mode = Some(m);
        }
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
    }

    /// Every violation, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.out.is_none() {
            v.push("out: required (set `out` in the config or pass --out)".to_string());
        }
        if self.seeds.is_empty() {
            v.push("seeds: at least one seed is required".to_string());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            v.push("seeds: duplicates are not allowed".to_string());
        }
        let Some(mode) = self.mode else {
            v.push("mode: required (set `mode` in the config or pass --mode)".to_string());
            return v;
        };
        if mode == Mode::Eval {
            if self.checkpoint.is_none() {
                v.push("checkpoint: required in eval mode".to_string());
            }
            return v;
        }
        if let Err(e) = self.task.validate() {
            v.push(format!("task: {e}"));
        }
        if self.task.n_classes < 2 {
            v.push("task.n_classes: must be at least 2".to_string());
        }
        if let Err(e) = self.train.validate() {
            v.push(format!("train: {e}"));
        }
        if self.pretrain.width == 0 || self.pretrain.batch_size == 0 {
            v.push("pretrain: width and batch_size must be positive".to_string());
        }
        if self.method.eval_samples == 0 {
            v.push("method.eval_samples: must be at least 1".to_string());
        }
        if self.method.inducing_dim == 0 {
            v.push("method.inducing_dim: must be at least 1".to_string());
        }
        if let Err(e) = self.method.adapter().layer.validate() {
            v.push(format!("method: {e}"));
        }
        let stochastic = self.method.kind == MethodKind::BayesLora;
        match mode {
            Mode::SweepSamples => {
                if !stochastic {
                    v.push("method.kind: sweep-samples needs `bayes_lora`".to_string());
                }
                if self.sweep.samples.is_empty() || self.sweep.samples.contains(&0) {
                    v.push("sweep.samples: need a nonempty list of positive sample counts".to_string());
                }
            }
            Mode::Hpo => {
                if self.seeds.len() != 1 {
                    v.push("seeds: hpo runs on exactly one seed".to_string());
                }
                if self.hpo.initial_points == 0 {
                    v.push("hpo.initial_points: must be at least 1".to_string());
                }
                if self.hpo.candidates == 0 || self.hpo.mc_samples == 0 {
                    v.push("hpo.candidates and hpo.mc_samples: must be positive".to_string());
                }
            }
            Mode::AblateFlow if self.ablation.flow_depths.is_empty() => {
                v.push("ablation.flow_depths: need at least one depth".to_string());
            }
            Mode::AblateRank if self.ablation.inducing_dims.is_empty() || self.ablation.inducing_dims.contains(&0) => {
                v.push("ablation.inducing_dims: need a nonempty list of positive sizes".to_string());
            }
            _ => {}
        }
        v
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(v))
        }
    }
}

fn span_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => {
            let line = text[..r.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}
