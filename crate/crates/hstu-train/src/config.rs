//! Run configuration: one TOML file describes the model, the data source,
//! stochastic-length scheduling, the optimizer, and evaluation. Every run
//! writes a resolved copy of its configuration next to its artifacts.

use anyhow::{bail, Context};
use hstu_core::layer::CacheMode;
use hstu_core::model::ModelConfig;
use hstu_core::sampling::LbslConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::synth::SyntheticSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data: DataSection,
    #[serde(default)]
    pub sl: SlSection,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub eval: EvalSection,
}

/// Where examples come from and how many steps to run over them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSection {
    pub source: DataSource,
    /// Hard cap on sequence length applied at load time (latest events win).
    #[serde(default)]
    pub l_max: Option<usize>,
    /// Users per simulated rank per step.
    pub batch_size: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv { path: String },
    Jsonl { path: String },
}

/// Train-time sequence subsampling. Inference always runs full length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlSection {
    #[serde(default)]
    pub enabled: bool,
    /// Length-distribution exponent; kept length targets n^(alpha/2).
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub mode: SlMode,
    /// Global cap on kept length. Required for the load-balanced mode.
    #[serde(default)]
    pub ell_sl: Option<usize>,
    /// Work-model exponent for load accounting.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_recal")]
    pub recal_period: usize,
    /// Simulated data-parallel world size.
    #[serde(default = "default_ranks")]
    pub ranks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SlMode {
    #[default]
    Standard,
    Lbsl,
}

impl Default for SlSection {
    fn default() -> Self {
        SlSection {
            enabled: false,
            alpha: default_alpha(),
            mode: SlMode::Standard,
            ell_sl: None,
            gamma: default_gamma(),
            warmup_steps: default_warmup(),
            recal_period: default_recal(),
            ranks: default_ranks(),
        }
    }
}

impl SlSection {
    pub fn lbsl_config(&self) -> Option<LbslConfig> {
        if !(self.enabled && self.mode == SlMode::Lbsl) {
            return None;
        }
        Some(LbslConfig {
            ell_sl: self.ell_sl.unwrap_or(0),
            alpha: self.alpha,
            gamma: self.gamma,
            warmup_steps: self.warmup_steps,
            recal_period: self.recal_period,
            ranks: self.ranks,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimSection {
    #[serde(default = "default_algorithm")]
    pub algorithm: String,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Backward path: rematerialize from the minimal cache or keep the full
    /// cache.
    #[serde(default)]
    pub cache: CacheChoice,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            algorithm: default_algorithm(),
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            seed: default_seed(),
            cache: CacheChoice::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CacheChoice {
    Full,
    #[default]
    Minimal,
}

impl CacheChoice {
    pub fn mode(self) -> CacheMode {
        match self {
            CacheChoice::Full => CacheMode::Full,
            CacheChoice::Minimal => CacheMode::Minimal,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSection {
    /// Chronological holdout fraction; evaluation data is strictly later
    /// than training data.
    #[serde(default = "default_split")]
    pub split_fraction: f64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Stop early once mean eval NE over the reported tasks drops below
    /// this.
    #[serde(default)]
    pub stop_ne: Option<f64>,
    /// Tasks to report; all of them when empty.
    #[serde(default)]
    pub tasks: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            split_fraction: default_split(),
            eval_every: default_eval_every(),
            stop_ne: None,
            tasks: Vec::new(),
        }
    }
}

fn default_alpha() -> f64 {
    1.7465
}
fn default_gamma() -> f64 {
    1.5
}
fn default_warmup() -> usize {
    10
}
fn default_recal() -> usize {
    10
}
fn default_ranks() -> usize {
    1
}
fn default_algorithm() -> String {
    "adam".into()
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_seed() -> u64 {
    0
}
fn default_split() -> f64 {
    0.15
}
fn default_eval_every() -> usize {
    50
}

impl TrainConfig {
    pub fn parse(text: &str) -> anyhow::Result<TrainConfig> {
        let cfg: TrainConfig = toml::from_str(text).context("parsing configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<TrainConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        TrainConfig::parse(&text)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        if self.data.batch_size == 0 {
            bail!("batch_size must be positive");
        }
        if self.data.steps == 0 {
            bail!("steps must be positive");
        }
        if self.optim.algorithm != "adam" {
            bail!("unknown optimizer {:?}; only \"adam\" is implemented", self.optim.algorithm);
        }
        if !(self.optim.lr.is_finite() && self.optim.lr >= 0.0) {
            bail!("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.eval.split_fraction) {
            bail!("split_fraction must lie in [0, 1)");
        }
        if self.eval.eval_every == 0 {
            bail!("eval_every must be positive");
        }
        if let Some(t) = self.eval.tasks.iter().find(|&&t| t >= self.model.tasks) {
            bail!("eval task {t} out of range for {} tasks", self.model.tasks);
        }
        if self.sl.enabled {
            if !(self.sl.alpha.is_finite() && self.sl.alpha > 0.0) {
                bail!("sl.alpha must be finite and positive");
            }
            if self.sl.mode == SlMode::Lbsl {
                match self.sl.ell_sl {
                    None | Some(0) => bail!("lbsl mode needs a positive sl.ell_sl"),
                    _ => {}
                }
                // Surface bad scheduler parameters at load time.
                hstu_core::sampling::LbslState::new(self.sl.lbsl_config().unwrap(), 0)?;
            }
        }
        if self.sl.ranks == 0 {
            bail!("sl.ranks must be positive");
        }
        Ok(())
    }

    /// Task indices reported by evaluation.
    pub fn eval_tasks(&self) -> Vec<usize> {
        if self.eval.tasks.is_empty() {
            (0..self.model.tasks).collect()
        } else {
            self.eval.tasks.clone()
        }
    }
}
