//! Synthetic regression tasks and CSV ingestion.
//!
//! Curve and density-shape formulas are this crate's own choices:
//!
//! | name | input box | target |
//! |------|-----------|--------|
//! | `sinusoid` | `[-1, 1]` | `sin(2πx)` |
//! | `sawtooth` | `[-1, 1]` | `2·frac(4x) - 1` |
//! | `exponential` | `[0, 2]` | `exp(5x)` |
//! | `asymptote` | `(-1, 1)` | `tan(πx/2)` |
//! | `linear` | `[-1, 1]` | `3x + 1` |
//! | `heavy_outlier` | `[-1, 1]` | `sin(πx)`, noisy with 2% outliers scaled ×100 |
//!
//! Density shapes sample `y | x` for scalar `x ∈ [0, 1]`:
//!
//! | name | `y | x` |
//! |------|---------|
//! | `bimodal` | `x ± 1` with equal odds, plus `N(0, 0.1²)` |
//! | `fan` | `x + N(0, (0.05 + 0.5x)²)` |
//! | `ring` | `±√(1 - u²) + N(0, 0.05²)` with `u = 2x - 1` |
//! | `step_mixture` | `1{x ≥ 0.5} + N(0, 0.1²)` w.p. 0.7, else `U(0, 1)` |
//! | `uniform` | `U(0, 1)` regardless of `x` |

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::TruncatedGaussian;
use crate::training::SampleBatch;

pub const CURVES: &[&str] = &["sinusoid", "sawtooth", "exponential", "asymptote", "linear", "heavy_outlier"];
pub const BBOB_FUNCTIONS: &[&str] =
    &["sphere", "rastrigin", "rosenbrock", "griewank_rosenbrock", "lin_slope", "discus", "bent_cigar", "weierstrass"];
pub const DENSITY_SHAPES: &[&str] = &["bimodal", "fan", "ring", "step_mixture", "uniform"];

/// Additive Gaussian noise plus occasional multiplicative outliers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Noise {
    pub std: f64,
    pub outlier_prob: f64,
    pub outlier_scale: f64,
}

impl Noise {
    pub fn validate(&self) -> Result<()> {
        if !(self.std >= 0.0 && self.std.is_finite()) {
            return Err(Error::Config(format!("noise.std must be >= 0, got {}", self.std)));
        }
        if !(0.0..=1.0).contains(&self.outlier_prob) {
            return Err(Error::Config(format!("noise.outlier_prob must be in [0, 1], got {}", self.outlier_prob)));
        }
        Ok(())
    }

    fn apply(&self, y: f64, rng: &mut ChaCha8Rng) -> f64 {
        let mut y = y;
        if self.outlier_prob > 0.0 && rng.random::<f64>() < self.outlier_prob {
            y *= self.outlier_scale;
        }
        if self.std > 0.0 {
            y += self.std * standard_normal(rng);
        }
        y
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curve {
    Sinusoid,
    Sawtooth,
    Exponential,
    Asymptote,
    Linear,
    HeavyOutlier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bbob {
    Sphere,
    Rastrigin,
    Rosenbrock,
    GriewankRosenbrock,
    LinSlope,
    Discus,
    BentCigar,
    Weierstrass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Bimodal,
    Fan,
    Ring,
    StepMixture,
    Uniform,
}

fn lookup<T: Copy>(kind: &'static str, name: &str, names: &[&str], values: &[T]) -> Result<T> {
    names
        .iter()
        .position(|n| *n == name)
        .map(|i| values[i])
        .ok_or_else(|| Error::Lookup { kind, name: name.to_string(), options: names.join(", ") })
}

impl Bbob {
    pub fn from_name(name: &str) -> Result<Self> {
        use Bbob::*;
        lookup(
            "BBOB function",
            name,
            BBOB_FUNCTIONS,
            &[Sphere, Rastrigin, Rosenbrock, GriewankRosenbrock, LinSlope, Discus, BentCigar, Weierstrass],
        )
    }

    pub fn min_dim(self) -> usize {
        match self {
            Bbob::Rosenbrock | Bbob::GriewankRosenbrock => 2,
            _ => 1,
        }
    }

    /// Raw definition, no rotation, shift or offset.
    pub fn eval(self, x: &[f64]) -> f64 {
        let d = x.len();
        match self {
            Bbob::Sphere => x.iter().map(|v| v * v).sum(),
            Bbob::Rastrigin => {
                10.0 * (d as f64 - x.iter().map(|v| (2.0 * PI * v).cos()).sum::<f64>()) + x.iter().map(|v| v * v).sum::<f64>()
            }
            Bbob::Rosenbrock => {
                x.windows(2).map(|w| 100.0 * (w[0] * w[0] - w[1]).powi(2) + (w[0] - 1.0).powi(2)).sum()
            }
            Bbob::GriewankRosenbrock => {
                let s: f64 = x
                    .windows(2)
                    .map(|w| {
                        let s = 100.0 * (w[0] * w[0] - w[1]).powi(2) + (w[0] - 1.0).powi(2);
                        s / 4000.0 - s.cos()
                    })
                    .sum();
                10.0 * s / (d - 1) as f64 + 10.0
            }
            Bbob::LinSlope => {
                // optimum at x = (5, …, 5)
                (0..d)
                    .map(|i| {
                        let e = if d > 1 { i as f64 / (d - 1) as f64 } else { 0.0 };
                        let s = 10f64.powf(e);
                        let z = if x[i] * 5.0 < 25.0 { x[i] } else { 5.0 };
                        5.0 * s - s * z
                    })
                    .sum()
            }
            Bbob::Discus => 1e6 * x[0] * x[0] + x[1..].iter().map(|v| v * v).sum::<f64>(),
            Bbob::BentCigar => x[0] * x[0] + 1e6 * x[1..].iter().map(|v| v * v).sum::<f64>(),
            Bbob::Weierstrass => {
                let f0: f64 = (0..12).map(|k| 0.5f64.powi(k) * (PI * 3f64.powi(k)).cos()).sum();
                let s: f64 = x
                    .iter()
                    .map(|v| (0..12).map(|k| 0.5f64.powi(k) * (2.0 * PI * 3f64.powi(k) * (v + 0.5)).cos()).sum::<f64>())
                    .sum();
                10.0 * (s / d as f64 - f0).powi(3)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Curve { curve: Curve },
    Bbob { function: Bbob },
    Shape { shape: Shape },
}

/// A reproducible generator of `(x, y)` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub name: String,
    pub input_dim: usize,
    pub low: f64,
    pub high: f64,
    pub target: Target,
    pub noise: Noise,
}

impl SyntheticTask {
    /// Noise-free target, or `None` for conditional density shapes.
    pub fn clean(&self, x: &[f64]) -> Option<f64> {
        match self.target {
            Target::Curve { curve } => {
                let v = x[0];
                Some(match curve {
                    Curve::Sinusoid => (2.0 * PI * v).sin(),
                    Curve::Sawtooth => 2.0 * (4.0 * v).rem_euclid(1.0) - 1.0,
                    Curve::Exponential => (5.0 * v).exp(),
                    Curve::Asymptote => (0.5 * PI * v).tan(),
                    Curve::Linear => 3.0 * v + 1.0,
                    Curve::HeavyOutlier => (PI * v).sin(),
                })
            }
            Target::Bbob { function } => Some(function.eval(x)),
            Target::Shape { .. } => None,
        }
    }

    /// One draw of `y | x`.
    pub fn sample_y(&self, x: &[f64], rng: &mut ChaCha8Rng) -> f64 {
        let y = match self.target {
            Target::Shape { shape } => sample_shape(shape, x[0], rng),
            _ => self.clean(x).expect("deterministic target"),
        };
        self.noise.apply(y, rng)
    }

    pub fn sample_x(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let open_low = matches!(self.target, Target::Curve { curve: Curve::Asymptote });
        (0..self.input_dim)
            .map(|_| loop {
                let v = rng.random_range(self.low..self.high);
                if !(open_low && v == self.low) {
                    break v;
                }
            })
            .collect()
    }

    /// `n` pairs from the stream seeded by `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<SampleBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x = self.sample_x(&mut rng);
            ys.push(self.sample_y(&x, &mut rng));
            xs.push(x);
        }
        SampleBatch::new(xs, ys)
    }

    /// `n` inputs with their noise-free targets.
    pub fn sample_clean(&self, n: usize, seed: u64) -> Result<SampleBatch> {
        if self.clean(&vec![self.low; self.input_dim]).is_none() {
            return Err(Error::Usage(format!("task `{}` has no deterministic target", self.name)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| self.sample_x(&mut rng)).collect();
        let ys = xs.iter().map(|x| self.clean(x).expect("checked")).collect();
        SampleBatch::new(xs, ys)
    }

    pub fn is_conditional(&self) -> bool {
        matches!(self.target, Target::Shape { .. })
    }
}

fn sample_shape(shape: Shape, x: f64, rng: &mut ChaCha8Rng) -> f64 {
    match shape {
        Shape::Bimodal => {
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            x + side + 0.1 * standard_normal(rng)
        }
        Shape::Fan => x + (0.05 + 0.5 * x) * standard_normal(rng),
        Shape::Ring => {
            let u = 2.0 * x - 1.0;
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            side * (1.0 - u * u).max(0.0).sqrt() + 0.05 * standard_normal(rng)
        }
        Shape::StepMixture => {
            if rng.random::<f64>() < 0.7 {
                f64::from(u8::from(x >= 0.5)) + 0.1 * standard_normal(rng)
            } else {
                rng.random::<f64>()
            }
        }
        Shape::Uniform => rng.random::<f64>(),
    }
}

/// One of [`CURVES`].
pub fn make_curve(name: &str) -> Result<SyntheticTask> {
    use Curve::*;
    let curve = lookup("curve", name, CURVES, &[Sinusoid, Sawtooth, Exponential, Asymptote, Linear, HeavyOutlier])?;
    let (low, high) = match curve {
        Exponential => (0.0, 2.0),
        _ => (-1.0, 1.0),
    };
    let noise = match curve {
        HeavyOutlier => Noise { std: 0.02, outlier_prob: 0.02, outlier_scale: 100.0 },
        _ => Noise::default(),
    };
    Ok(SyntheticTask { name: name.to_string(), input_dim: 1, low, high, target: Target::Curve { curve }, noise })
}

/// One of [`BBOB_FUNCTIONS`] on `[-5, 5]^dim`.
pub fn make_bbob(name: &str, dim: usize) -> Result<SyntheticTask> {
    let function = Bbob::from_name(name)?;
    if dim < function.min_dim() {
        return Err(Error::Config(format!("{name} needs dimension >= {}, got {dim}", function.min_dim())));
    }
    Ok(SyntheticTask {
        name: format!("{name}_{dim}d"),
        input_dim: dim,
        low: -5.0,
        high: 5.0,
        target: Target::Bbob { function },
        noise: Noise::default(),
    })
}

/// One of [`DENSITY_SHAPES`].
pub fn make_density_shape(name: &str) -> Result<SyntheticTask> {
    use Shape::*;
    let shape = lookup("density shape", name, DENSITY_SHAPES, &[Bimodal, Fan, Ring, StepMixture, Uniform])?;
    Ok(SyntheticTask {
        name: name.to_string(),
        input_dim: 1,
        low: 0.0,
        high: 1.0,
        target: Target::Shape { shape },
        noise: Noise::default(),
    })
}

pub fn truncated_gaussian(mu: f64, sigma: f64) -> Result<TruncatedGaussian> {
    TruncatedGaussian::new(mu, sigma)
}

/// Serializable task selector used by configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Curve {
        name: String,
        #[serde(default)]
        noise: Option<Noise>,
    },
    Bbob {
        name: String,
        dim: usize,
    },
    Shape {
        name: String,
    },
    Csv {
        path: String,
        target: String,
    },
}

impl TaskSpec {
    /// The synthetic generator, or `None` for CSV specs.
    pub fn synthetic(&self) -> Result<Option<SyntheticTask>> {
        Ok(Some(match self {
            TaskSpec::Curve { name, noise } => {
                let mut t = make_curve(name)?;
                if let Some(n) = noise {
                    n.validate()?;
                    t.noise = *n;
                }
                t
            }
            TaskSpec::Bbob { name, dim } => make_bbob(name, *dim)?,
            TaskSpec::Shape { name } => make_density_shape(name)?,
            TaskSpec::Csv { .. } => return Ok(None),
        }))
    }
}

/// A numeric table with a deterministic train/test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularDataset {
    pub columns: Vec<String>,
    pub target: String,
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Rows skipped because a cell failed to parse.
    pub dropped: usize,
}

impl TabularDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> Result<SampleBatch> {
        SampleBatch::new(idx.iter().map(|&i| self.features[i].clone()).collect(), idx.iter().map(|&i| self.targets[i]).collect())
    }

    pub fn train_batch(&self) -> Result<SampleBatch> {
        self.batch(&self.train)
    }

    pub fn test_batch(&self) -> Result<SampleBatch> {
        self.batch(&self.test)
    }
}

/// Reads a headed, comma-delimited numeric file. `test_fraction` of the rows
/// (rounded) go to the test split.
pub fn load_csv(path: &Path, target: &str, test_fraction: f64, seed: u64) -> Result<TabularDataset> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction must be in [0, 1), got {test_fraction}")));
    }
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Ingest(format!("{}: header: {e}", path.display())))?
        .iter()
        .map(String::from)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Ingest(format!("{}: empty file or missing header", path.display())));
    }
    let t = header.iter().position(|c| c == target).ok_or_else(|| {
        Error::Ingest(format!("{}: no target column `{target}`; columns: {}", path.display(), header.join(", ")))
    })?;
    let mut features = vec![];
    let mut targets = vec![];
    let mut dropped = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Ingest(format!("{}: row {}: {e}", path.display(), line + 2)))?;
        let parsed: Option<Vec<f64>> = if record.len() == header.len() {
            record.iter().map(|c| c.parse::<f64>().ok().filter(|v| v.is_finite())).collect()
        } else {
            None
        };
        match parsed {
            Some(mut row) => {
                targets.push(row.remove(t));
                features.push(row);
            }
            None => dropped += 1,
        }
    }
    if targets.is_empty() {
        return Err(Error::Ingest(format!("{}: no numeric rows ({dropped} dropped)", path.display())));
    }
    let n = targets.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (n as f64 * test_fraction).round() as usize;
    let test = idx.split_off(n - n_test);
    let mut columns = header;
    columns.remove(t);
    Ok(TabularDataset { columns, target: target.to_string(), features, targets, train: idx, test, dropped })
}
