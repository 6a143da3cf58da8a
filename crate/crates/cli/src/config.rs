//! Experiment configuration files (TOML).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use decoreg_core::decoding::{SamplerConfig, Statistic};
use decoreg_core::heads::{EncoderConfig, HeadConfig, ModelConfig};
use decoreg_core::tasks::{Noise, TaskSpec};
use decoreg_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    #[serde(default)]
    pub seed: u64,
    pub task: TaskConfig,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub statistic: Statistic,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    /// Train/test repetitions for the `density` command.
    #[serde(default = "default_splits")]
    pub splits: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

fn default_metrics() -> Vec<Metric> {
    vec![Metric::KendallTau, Metric::RelativeMse]
}

fn default_splits() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// `curve`, `bbob`, `shape` or `csv`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<Noise>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    /// CSV tasks only.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_n_train() -> usize {
    2000
}

fn default_n_test() -> usize {
    500
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_layers")]
    pub encoder_layers: usize,
    #[serde(default = "default_hidden")]
    pub encoder_hidden: usize,
    pub head: HeadConfig,
}

fn default_layers() -> usize {
    3
}

fn default_hidden() -> usize {
    256
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    KendallTau,
    RelativeMse,
    Nll,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::KendallTau => "kendall_tau",
            Metric::RelativeMse => "relative_mse",
            Metric::Nll => "nll",
        }
    }

    /// Version tag stored next to every reported value.
    pub fn definition(self) -> &'static str {
        match self {
            Metric::KendallTau => "kendall_tau_b/v1",
            Metric::RelativeMse => "mse_over_population_variance/v1",
            Metric::Nll => "mean_continuous_nll_scaled_targets/v1",
        }
    }

    pub fn higher_is_better(self) -> bool {
        self == Metric::KendallTau
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "default_cap")]
    pub cap: usize,
    /// Dotted config path to the values it takes, e.g. `"train.learning_rate"`.
    pub axes: BTreeMap<String, Vec<toml::Value>>,
}

fn default_cap() -> usize {
    64
}

impl TaskConfig {
    fn field(&self, name: &'static str, v: &Option<String>) -> Result<String, CliError> {
        v.clone().ok_or_else(|| CliError::usage(format!("task.{name} is required for task.kind = \"{}\"", self.kind)))
    }

    /// Resolves CSV paths against `base`.
    pub fn spec(&self, base: &Path) -> Result<TaskSpec, CliError> {
        Ok(match self.kind.as_str() {
            "curve" => TaskSpec::Curve { name: self.field("name", &self.name)?, noise: self.noise },
            "bbob" => TaskSpec::Bbob {
                name: self.field("name", &self.name)?,
                dim: self.dim.ok_or_else(|| CliError::usage("task.dim is required for task.kind = \"bbob\""))?,
            },
            "shape" => TaskSpec::Shape { name: self.field("name", &self.name)? },
            "csv" => {
                let p = PathBuf::from(self.field("path", &self.path)?);
                let p = if p.is_relative() { base.join(p) } else { p };
                TaskSpec::Csv { path: p.to_string_lossy().into_owned(), target: self.field("target", &self.target)? }
            }
            other => {
                return Err(CliError::usage(format!(
                    "task.kind must be one of curve, bbob, shape, csv; got \"{other}\""
                )))
            }
        })
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema != SCHEMA_VERSION {
            return Err(CliError::usage(format!("schema must be {SCHEMA_VERSION}, got {}", self.schema)));
        }
        self.task.spec(Path::new("."))?;
        if self.task.n_train < 2 || self.task.n_test < 2 {
            return Err(CliError::usage("task.n_train and task.n_test must be >= 2"));
        }
        if self.metrics.is_empty() {
            return Err(CliError::usage("metrics must list at least one metric"));
        }
        if self.splits == 0 {
            return Err(CliError::usage("splits must be >= 1"));
        }
        let head = &self.model.head;
        if self.train.weight_decay != 0.0 && !matches!(head, HeadConfig::Pointwise { .. }) {
            return Err(CliError::usage(format!(
                "train.weight_decay applies to pointwise heads only; model.head.kind is \"{}\"",
                head.name()
            )));
        }
        if self.metrics.contains(&Metric::Nll) && !head.is_distributional() {
            return Err(CliError::usage("metric nll needs a distributional head, not pointwise"));
        }
        self.model_config(1).validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        Ok(())
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig::new(input_dim).with_size(self.model.encoder_layers, self.model.encoder_hidden),
            head: self.model.head.clone(),
        }
    }

    /// The training config with the experiment seed folded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig { seed: self.seed, ..self.sampler.clone() }
    }
}
