//! Subcommand implementations and the pieces they share.

use std::path::Path;
use std::time::Instant;

use decoreg_core::eval::{continuous_nll, kendall_tau, relative_mse, NllSummary};
use decoreg_core::heads::save_checkpoint;
use decoreg_core::tasks::{load_csv, TaskSpec};
use decoreg_core::training::{History, NormalizerStats, Regressor, SampleBatch};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Metric, SCHEMA_VERSION};
use crate::output::OutDir;
use crate::plot::{Plot, Series};
use crate::{CliError, CliResult};

pub mod density;
pub mod fit;
pub mod risk;
pub mod sweep;
pub mod tokenize;

/// Train and test batches for one split.
pub struct Data {
    pub train: SampleBatch,
    pub test: SampleBatch,
}

/// Split `split` of the configured task. Synthetic tasks draw fresh samples
/// per split; CSV tasks reshuffle the same rows.
pub fn load_data(cfg: &ExperimentConfig, base: &Path, split: u64) -> CliResult<Data> {
    let seed = cfg.seed.wrapping_add(split.wrapping_mul(1_000_003));
    let spec = cfg.task.spec(base)?;
    if let TaskSpec::Csv { path, target } = &spec {
        let ds = load_csv(Path::new(path), target, cfg.task.test_fraction, seed)?;
        if ds.test.len() < 2 {
            return Err(CliError::usage(format!(
                "{path}: test split has {} rows; raise task.test_fraction",
                ds.test.len()
            )));
        }
        return Ok(Data { train: ds.train_batch()?, test: ds.test_batch()? });
    }
    let task = spec.synthetic()?.expect("synthetic task");
    Ok(Data { train: task.sample(cfg.task.n_train, seed)?, test: task.sample(cfg.task.n_test, seed ^ 0x7e57_7e57)? })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: String,
    pub definition: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub percent: Option<f64>,
}

impl MetricValue {
    fn new(m: Metric, value: f64) -> Self {
        let percent = (m == Metric::KendallTau).then(|| 100.0 * value);
        MetricValue { name: m.name().into(), definition: m.definition().into(), value, percent }
    }
}

/// Point predictions on `test` plus every requested metric.
pub fn evaluate(reg: &Regressor, test: &SampleBatch, cfg: &ExperimentConfig) -> CliResult<(Vec<MetricValue>, Vec<f64>)> {
    let preds = reg.predict(test.features(), cfg.statistic, &cfg.sampler_config())?;
    let mut out = Vec::new();
    for &m in &cfg.metrics {
        let value = match m {
            Metric::KendallTau => kendall_tau(&preds, test.targets())?,
            Metric::RelativeMse => relative_mse(&preds, test.targets())?,
            Metric::Nll => test_nll(reg, test)?.mean,
        };
        out.push(MetricValue::new(m, value));
    }
    Ok((out, preds))
}

/// NLL of the test targets in the head's scaled space.
pub fn test_nll(reg: &Regressor, test: &SampleBatch) -> CliResult<NllSummary> {
    let phi = reg.features(test.features())?;
    let y: Vec<f64> = test.targets().iter().map(|&v| reg.stats.apply_y(v)).collect();
    Ok(NllSummary::from_values(&continuous_nll(&reg.model, &phi, &y)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub checkpoint: String,
    pub history: String,
    pub predictions: String,
    pub plot: String,
}

/// Summary document of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub schema: u32,
    pub command: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub metrics: Vec<MetricValue>,
    pub history: History,
    pub normalizer: NormalizerStats,
    pub param_count: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub artifacts: Artifacts,
    pub wall_clock_secs: f64,
}

impl RunResult {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }
}

/// Everything one fit produces, before anything touches disk.
pub struct FitOutcome {
    pub result: RunResult,
    pub regressor: Regressor,
    pub test: SampleBatch,
    pub preds: Vec<f64>,
}

/// Failure inside the training loop, with the history up to that point.
pub struct FitFailure {
    pub error: CliError,
    pub history: History,
}

impl From<CliError> for FitFailure {
    fn from(error: CliError) -> Self {
        FitFailure { error, history: History::default() }
    }
}

pub fn fit_experiment(cfg: &ExperimentConfig, base: &Path, command: &str) -> Result<FitOutcome, FitFailure> {
    let start = Instant::now();
    let data = load_data(cfg, base, 0)?;
    let model_cfg = cfg.model_config(data.train.input_dim());
    model_cfg.validate().map_err(CliError::from)?;
    let mut history = History::default();
    let regressor = match Regressor::fit_logged(model_cfg, &data.train, &cfg.train_config(), &mut history) {
        Ok(r) => r,
        Err(e) => return Err(FitFailure { error: e.into(), history }),
    };
    let (metrics, preds) = evaluate(&regressor, &data.test, cfg)?;
    let result = RunResult {
        schema: SCHEMA_VERSION,
        command: command.into(),
        seed: cfg.seed,
        config: cfg.clone(),
        metrics,
        history,
        normalizer: regressor.stats.clone(),
        param_count: regressor.model.param_count(),
        train_size: data.train.len(),
        test_size: data.test.len(),
        artifacts: Artifacts {
            checkpoint: "model.ckpt".into(),
            history: "history.jsonl".into(),
            predictions: "predictions.csv".into(),
            plot: "predictions.svg".into(),
        },
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(FitOutcome { result, regressor, test: data.test, preds })
}

/// Writes the run's artifacts into `out`.
pub fn write_fit(out: &OutDir, o: &FitOutcome) -> CliResult<()> {
    out.write_jsonl(&o.result.artifacts.history, &o.result.history.epochs)?;
    save_checkpoint(&o.regressor.model, &out.path(&o.result.artifacts.checkpoint))?;
    let p = o.test.input_dim();
    let mut header: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    header.push("prediction".into());
    let rows: Vec<Vec<f64>> = o
        .test
        .features()
        .iter()
        .zip(o.test.targets())
        .zip(&o.preds)
        .map(|((x, &y), &pr)| x.iter().copied().chain([y, pr]).collect())
        .collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    out.write_csv(&o.result.artifacts.predictions, &header_refs, &rows)?;
    let truth = rows.iter().map(|r| (r[0], r[p])).collect();
    let pred = rows.iter().map(|r| (r[0], r[p + 1])).collect();
    let plot = Plot::new(&format!("{} on {}", o.result.config.model.head.name(), task_label(&o.result.config)), "x0", "y")
        .with(Series::points("target", truth))
        .with(Series::points("prediction", pred));
    out.write_text(&o.result.artifacts.plot, &plot.to_svg())?;
    out.write_json("result.json", &o.result)
}

pub fn task_label(cfg: &ExperimentConfig) -> String {
    match (&cfg.task.name, &cfg.task.target) {
        (Some(n), _) => format!("{} {n}", cfg.task.kind),
        (None, Some(t)) => format!("csv target {t}"),
        _ => cfg.task.kind.clone(),
    }
}

/// Applies the global `--seed` override.
pub fn with_seed(mut cfg: ExperimentConfig, seed: Option<u64>) -> ExperimentConfig {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg
}

pub fn config_dir(path: &Path) -> &Path {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}
