//! Normalization, losses and the early-stopping training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Expr, Tensor, Var};
use crate::decoding::{self, ConditionedDecoder, SamplerConfig, Statistic};
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, MdnVars, ModelConfig, RegressionModel};
use crate::tokenizer::{TokenScheme, TokenSeq};

/// `½ ln(2π)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Largest double below one; normalized decoder targets are clamped to it.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Feature rows paired with scalar targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    features: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

impl SampleBatch {
    pub fn new(features: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        if features.len() != targets.len() {
            return Err(Error::Config(format!(
                "{} feature rows but {} targets",
                features.len(),
                targets.len()
            )));
        }
        let width = features.first().map_or(0, Vec::len);
        for (i, row) in features.iter().enumerate() {
            if row.len() != width {
                return Err(Error::Config(format!("feature row {i} has {} columns, expected {width}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("feature row {i} is not finite")));
            }
        }
        if let Some(i) = targets.iter().position(|v| !v.is_finite()) {
            return Err(Error::Config(format!("target {i} is not finite")));
        }
        Ok(SampleBatch { features, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn subset(&self, idx: &[usize]) -> SampleBatch {
        SampleBatch {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
        }
    }

    /// `[n, p]` feature matrix.
    pub fn feature_tensor(&self) -> Result<Tensor> {
        Tensor::new([self.len(), self.input_dim()], self.features.concat())
    }
}

/// How targets are mapped before training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetScaling {
    /// `(y - min) / (max - min)`.
    MinMax,
    /// Min-max followed by a `-0.5` shift.
    Centered,
    /// Targets used as given.
    Raw,
}

impl TargetScaling {
    /// Scaling each head expects.
    pub fn for_head(head: &HeadConfig) -> Self {
        match head {
            HeadConfig::Decoder { scheme, .. } if !scheme.is_normalized() => TargetScaling::Raw,
            HeadConfig::Decoder { .. } | HeadConfig::Riemann { .. } => TargetScaling::MinMax,
            HeadConfig::Pointwise { sigmoid: true } => TargetScaling::MinMax,
            HeadConfig::Pointwise { sigmoid: false } | HeadConfig::Mdn { .. } => TargetScaling::Centered,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizerStats {
    pub x_mean: Vec<f64>,
    /// Zero-variance columns store mean 0 and std 1 so they pass through.
    pub x_std: Vec<f64>,
    pub y_min: f64,
    pub y_max: f64,
    pub scaling: TargetScaling,
}

impl NormalizerStats {
    pub fn fit(batch: &SampleBatch, scaling: TargetScaling) -> Result<Self> {
        let n = batch.len();
        if n < 2 {
            return Err(Error::Degenerate(format!("need at least 2 samples to normalize, got {n}")));
        }
        let p = batch.input_dim();
        let mut x_mean = vec![0.0; p];
        let mut x_std = vec![0.0; p];
        for j in 0..p {
            let mean = batch.features.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            let var = batch.features.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
            if var > 0.0 {
                x_mean[j] = mean;
                x_std[j] = var.sqrt();
            } else {
                x_std[j] = 1.0;
            }
        }
        let y_min = batch.targets.iter().copied().fold(f64::INFINITY, f64::min);
        let y_max = batch.targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if scaling != TargetScaling::Raw && y_max <= y_min {
            return Err(Error::Degenerate(format!("all targets equal {y_min}; min-max scaling is undefined")));
        }
        Ok(NormalizerStats { x_mean, x_std, y_min, y_max, scaling })
    }

    pub fn apply_x(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.x_mean).zip(&self.x_std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn invert_x(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.x_mean).zip(&self.x_std).map(|((v, m), s)| v * s + m).collect()
    }

    fn shift(&self) -> f64 {
        if self.scaling == TargetScaling::Centered {
            0.5
        } else {
            0.0
        }
    }

    pub fn apply_y(&self, y: f64) -> f64 {
        match self.scaling {
            TargetScaling::Raw => y,
            _ => (y - self.y_min) / (self.y_max - self.y_min) - self.shift(),
        }
    }

    pub fn invert_y(&self, y: f64) -> f64 {
        match self.scaling {
            TargetScaling::Raw => y,
            _ => (y + self.shift()) * (self.y_max - self.y_min) + self.y_min,
        }
    }

    /// Jacobian `dy_scaled / dy`, used to move densities between spaces.
    pub fn y_scale(&self) -> f64 {
        match self.scaling {
            TargetScaling::Raw => 1.0,
            _ => 1.0 / (self.y_max - self.y_min),
        }
    }

    pub fn apply(&self, batch: &SampleBatch) -> SampleBatch {
        SampleBatch {
            features: batch.features.iter().map(|r| self.apply_x(r)).collect(),
            targets: batch.targets.iter().map(|&y| self.apply_y(y)).collect(),
        }
    }
}

/// Mean over the batch of summed per-position token negative log-likelihoods,
/// for logits `[B, L, V]`.
pub fn token_ce_loss(e: &mut Expr, logits: Var, targets: &[TokenSeq]) -> Result<Var> {
    let shape = e.shape(logits).to_vec();
    let [b, l, v] = shape[..] else {
        return Err(Error::Usage(format!("token logits must be rank 3, got {shape:?}")));
    };
    if targets.len() != b || targets.iter().any(|t| t.len() != l) {
        return Err(Error::Usage(format!("targets do not match logits of shape [{b}, {l}, {v}]")));
    }
    let flat: Vec<usize> = targets.iter().flat_map(|t| t.0.iter().copied()).collect();
    if flat.iter().any(|&t| t >= v) {
        return Err(Error::Usage(format!("target token outside vocabulary of {v}")));
    }
    let lp = e.log_softmax(logits);
    let picked = e.pick(lp, flat)?;
    let total = e.sum(picked);
    Ok(e.scale(total, -1.0 / b as f64))
}

/// Mean cross-entropy of bin logits `[B, n]` against bin indices.
pub fn riemann_ce_loss(e: &mut Expr, logits: Var, bins: &[usize]) -> Result<Var> {
    let n = *e.shape(logits).last().expect("rank >= 1");
    if let Some(bad) = bins.iter().find(|&&i| i >= n) {
        return Err(Error::Usage(format!("bin index {bad} out of range for {n} bins")));
    }
    let lp = e.log_softmax(logits);
    let picked = e.pick(lp, bins.to_vec())?;
    let m = e.mean(picked);
    Ok(e.scale(m, -1.0))
}

/// Mean squared error of predictions `[B, 1]` (or `[B]`).
pub fn mse_loss(e: &mut Expr, preds: Var, targets: &[f64]) -> Result<Var> {
    let shape = e.shape(preds).to_vec();
    if shape.iter().product::<usize>() != targets.len() {
        return Err(Error::Usage(format!("{} targets for predictions {shape:?}", targets.len())));
    }
    let t = e.constant(Tensor::new(shape, targets.to_vec())?);
    let d = e.sub(preds, t)?;
    let d = e.square(d);
    Ok(e.mean(d))
}

/// Mean of `-log Σ π_m N(y; μ_m, σ_m²)`, via log-sum-exp.
pub fn mdn_nll_loss(e: &mut Expr, vars: MdnVars, targets: &[f64]) -> Result<Var> {
    let shape = e.shape(vars.mu).to_vec();
    let [b, m] = shape[..] else {
        return Err(Error::Usage(format!("mixture parameters must be [B, M], got {shape:?}")));
    };
    if targets.len() != b {
        return Err(Error::Usage(format!("{} targets for a batch of {b}", targets.len())));
    }
    let wide: Vec<f64> = targets.iter().flat_map(|&y| std::iter::repeat_n(y, m)).collect();
    let y = e.constant(Tensor::new([b, m], wide)?);
    let z = e.sub(y, vars.mu)?;
    let z = e.div(z, vars.sigma)?;
    let z = e.square(z);
    let z = e.scale(z, -0.5);
    let ls = e.log(vars.sigma);
    let t = e.sub(z, ls)?;
    let t = e.add(t, vars.log_pi)?;
    let t = e.add_scalar(t, -HALF_LN_2PI);
    let lse = e.logsumexp(t);
    let mean = e.mean(lse);
    Ok(e.scale(mean, -1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub batch_size: usize,
    /// Datasets smaller than this train full-batch.
    pub full_batch_below: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            max_epochs: 300,
            patience: 5,
            validation_fraction: 0.1,
            batch_size: 64,
            full_batch_below: 256,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("train.learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train.validation_fraction must be in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("train.weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were restored, if any epoch ran.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Head-specific training targets.
enum Targets {
    Tokens(Vec<TokenSeq>),
    Bins(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    fn build(head: &HeadConfig, y: &[f64]) -> Result<Self> {
        Ok(match head {
            HeadConfig::Decoder { scheme, .. } => Targets::Tokens(encode_targets(scheme, y)?),
            HeadConfig::Riemann { bins } => Targets::Bins(y.iter().map(|&v| riemann_bin(v, *bins)).collect()),
            _ => Targets::Values(y.to_vec()),
        })
    }

    fn subset(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Tokens(t) => Targets::Tokens(idx.iter().map(|&i| t[i].clone()).collect()),
            Targets::Bins(t) => Targets::Bins(idx.iter().map(|&i| t[i]).collect()),
            Targets::Values(t) => Targets::Values(idx.iter().map(|&i| t[i]).collect()),
        }
    }
}

/// Bin of `y ∈ [0, 1]` among `n` equal bins; `y = 1` falls in the last.
pub fn riemann_bin(y: f64, n: usize) -> usize {
    ((y.max(0.0) * n as f64).floor() as usize).min(n - 1)
}

/// Encodes scaled targets, clamping normalized ones into `[0, 1)`.
pub fn encode_targets(scheme: &TokenScheme, y: &[f64]) -> Result<Vec<TokenSeq>> {
    y.iter()
        .map(|&v| {
            let v = if scheme.is_normalized() { v.clamp(0.0, BELOW_ONE) } else { v };
            scheme.encode(v)
        })
        .collect()
}

/// Builds the head-appropriate loss for a batch of feature rows.
fn build_loss(model: &RegressionModel, e: &mut Expr, x: Tensor, targets: &Targets) -> Result<Var> {
    let x = e.constant(x);
    let phi = model.build_features(e, x)?;
    match (&model.config().head, targets) {
        (HeadConfig::Decoder { .. }, Targets::Tokens(t)) => {
            let inputs: Vec<Vec<usize>> = t.iter().map(|s| s[..s.len() - 1].to_vec()).collect();
            let logits = model.build_decoder(e, phi, &inputs)?;
            token_ce_loss(e, logits, t)
        }
        (HeadConfig::Riemann { .. }, Targets::Bins(b)) => {
            let logits = model.build_riemann_logits(e, phi)?;
            riemann_ce_loss(e, logits, b)
        }
        (HeadConfig::Pointwise { .. }, Targets::Values(v)) => {
            let p = model.build_pointwise(e, phi)?;
            mse_loss(e, p, v)
        }
        (HeadConfig::Mdn { .. }, Targets::Values(v)) => {
            let vars = model.build_mdn(e, phi)?;
            mdn_nll_loss(e, vars, v)
        }
        _ => Err(Error::Usage("targets do not match the head".into())),
    }
}

fn rows_tensor(batch: &SampleBatch, idx: &[usize]) -> Result<Tensor> {
    let p = batch.input_dim();
    let mut data = Vec::with_capacity(idx.len() * p);
    for &i in idx {
        data.extend_from_slice(&batch.features[i]);
    }
    Tensor::new([idx.len(), p], data)
}

/// The head loss graph on already-scaled data, with its root set. Leaves are
/// named after the model's parameters.
pub fn loss_expr(model: &RegressionModel, batch: &SampleBatch) -> Result<Expr> {
    let targets = Targets::build(&model.config().head, &batch.targets)?;
    let mut e = Expr::new();
    let loss = build_loss(model, &mut e, batch.feature_tensor()?, &targets)?;
    e.set_root(loss);
    Ok(e)
}

/// Head loss of `model` on already-scaled data.
pub fn evaluate_loss(model: &RegressionModel, batch: &SampleBatch) -> Result<f64> {
    let targets = Targets::build(&model.config().head, &batch.targets)?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    chunked_loss(model, batch, &targets, &idx)
}

fn chunked_loss(model: &RegressionModel, batch: &SampleBatch, targets: &Targets, idx: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(1024) {
        let mut e = Expr::new();
        let loss = build_loss(model, &mut e, rows_tensor(batch, chunk)?, &targets.subset(chunk))?;
        e.set_root(loss);
        let b = model.params().bindings();
        total += e.evaluate(&b)?.item() * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Deterministic shuffled `(train, validation)` index split.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * fraction).round() as usize).clamp(usize::from(n >= 2), n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Trains on already-scaled data with Adam, early stopping on a validation
/// split, and restores the best-epoch parameters.
pub fn fit(model: RegressionModel, batch: &SampleBatch, cfg: &TrainConfig) -> Result<(RegressionModel, History)> {
    let mut history = History::default();
    let model = fit_logged(model, batch, cfg, &mut history)?;
    Ok((model, history))
}

/// [`fit`] that records into `history` as it goes, so the epochs completed
/// before an error stay available.
pub fn fit_logged(
    mut model: RegressionModel,
    batch: &SampleBatch,
    cfg: &TrainConfig,
    history: &mut History,
) -> Result<RegressionModel> {
    cfg.validate()?;
    if batch.len() < 2 {
        return Err(Error::Usage(format!("need at least 2 samples to train, got {}", batch.len())));
    }
    if cfg.max_epochs == 0 {
        return Ok(model);
    }
    let targets = Targets::build(&model.config().head, &batch.targets)?;
    let (mut train_idx, val_idx) = split_indices(batch.len(), cfg.validation_fraction, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let batch_size = if train_idx.len() < cfg.full_batch_below { train_idx.len() } else { cfg.batch_size };
    let adam = AdamConfig { weight_decay: cfg.weight_decay, ..AdamConfig::with_lr(cfg.learning_rate) };
    let names: Vec<String> = model.params().names().map(String::from).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();

    let mut best = (f64::INFINITY, model.params().snapshot());
    let mut since_best = 0;
    for epoch in 0..cfg.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (bi, chunk) in train_idx.chunks(batch_size).enumerate() {
            let mut e = Expr::new();
            let loss = build_loss(&model, &mut e, rows_tensor(batch, chunk)?, &targets.subset(chunk))?;
            e.set_root(loss);
            let (v, grads) = {
                let b = model.params().bindings();
                e.value_and_gradient(&b, &name_refs)?
            };
            if !v.is_finite() || grads.values().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    epoch,
                    batch: bi,
                    detail: format!("loss {v} after {} completed epochs", history.epochs.len()),
                });
            }
            model.params_mut().adam_step(&grads, &adam)?;
            epoch_loss += v * chunk.len() as f64;
        }
        let train_loss = epoch_loss / train_idx.len() as f64;
        let val_loss = chunked_loss(&model, batch, &targets, &val_idx)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite { epoch, batch: 0, detail: format!("validation loss {val_loss}") });
        }
        history.epochs.push(EpochRecord { epoch, train_loss, val_loss });
        if val_loss < best.0 {
            best = (val_loss, model.params().snapshot());
            history.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    model.params_mut().restore(&best.1);
    Ok(model)
}

/// A model together with its normalizers, working in original units.
#[derive(Clone, Debug)]
pub struct Regressor {
    pub model: RegressionModel,
    pub stats: NormalizerStats,
}

impl Regressor {
    /// Fits normalizers on `batch`, builds a fresh model and trains it.
    pub fn fit(config: ModelConfig, batch: &SampleBatch, cfg: &TrainConfig) -> Result<(Self, History)> {
        let mut history = History::default();
        let reg = Self::fit_logged(config, batch, cfg, &mut history)?;
        Ok((reg, history))
    }

    pub fn fit_logged(config: ModelConfig, batch: &SampleBatch, cfg: &TrainConfig, history: &mut History) -> Result<Self> {
        let stats = NormalizerStats::fit(batch, TargetScaling::for_head(&config.head))?;
        let scaled = stats.apply(batch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
        let model = RegressionModel::new(config, &mut rng)?;
        let model = fit_logged(model, &scaled, cfg, history)?;
        Ok(Regressor { model, stats })
    }

    /// `φ` of raw feature rows.
    pub fn features(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        let p = self.model.config().encoder.input_dim;
        let mut data = Vec::with_capacity(rows.len() * p);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != p {
                return Err(Error::Config(format!("row {i} has {} features, model expects {p}", r.len())));
            }
            data.extend(self.stats.apply_x(r));
        }
        self.model.encode_features(&Tensor::new([rows.len(), p], data)?)
    }

    /// Point predictions in original units.
    pub fn predict(&self, rows: &[Vec<f64>], statistic: Statistic, sampler: &SamplerConfig) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Ok(vec![]);
        }
        let phi = self.features(rows)?;
        let scaled = match &self.model.config().head {
            HeadConfig::Decoder { scheme, .. } => {
                let dec = ConditionedDecoder::new(&self.model, phi)?;
                let ctx: Vec<usize> = (0..rows.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
                decoding::estimate_many(&dec, &ctx, scheme, statistic, sampler, &mut rng)?
            }
            HeadConfig::Riemann { bins } => {
                let probs = self.model.riemann_probs(&phi)?;
                (0..rows.len()).map(|i| riemann_point(probs.row(i), *bins, statistic)).collect()
            }
            HeadConfig::Pointwise { .. } => self.model.pointwise_predict(&phi)?,
            HeadConfig::Mdn { .. } => {
                let p = self.model.mdn_params(&phi)?;
                (0..rows.len()).map(|i| mdn_point(p.pi.row(i), p.mu.row(i), statistic)).collect()
            }
        };
        Ok(scaled.into_iter().map(|v| self.stats.invert_y(v)).collect())
    }

    /// One draw from the predictive distribution per row, in original units.
    /// Pointwise heads return their prediction.
    pub fn sample<R: Rng + ?Sized>(&self, rows: &[Vec<f64>], sampler: &SamplerConfig, rng: &mut R) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Ok(vec![]);
        }
        let phi = self.features(rows)?;
        let scaled = match &self.model.config().head {
            HeadConfig::Decoder { scheme, .. } => {
                let dec = ConditionedDecoder::new(&self.model, phi)?;
                let ctx: Vec<usize> = (0..rows.len()).collect();
                let seqs = decoding::sample_rows(&dec, scheme, &ctx, sampler, rng)?;
                seqs.iter().map(|s| scheme.decode(&s.0)).collect::<Result<Vec<_>>>()?
            }
            HeadConfig::Riemann { bins } => {
                let probs = self.model.riemann_probs(&phi)?;
                (0..rows.len())
                    .map(|i| {
                        let b = pick(probs.row(i), rng);
                        (b as f64 + rng.random::<f64>()) / *bins as f64
                    })
                    .collect()
            }
            HeadConfig::Pointwise { .. } => self.model.pointwise_predict(&phi)?,
            HeadConfig::Mdn { .. } => {
                let p = self.model.mdn_params(&phi)?;
                let mut out = Vec::with_capacity(rows.len());
                for i in 0..rows.len() {
                    let c = pick(p.pi.row(i), rng);
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    out.push(p.mu.row(i)[c] + p.sigma.row(i)[c] * z);
                }
                out
            }
        };
        Ok(scaled.into_iter().map(|v| self.stats.invert_y(v)).collect())
    }
}

fn pick<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * p.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, q) in p.iter().enumerate() {
        acc += q;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

fn riemann_point(p: &[f64], n: usize, statistic: Statistic) -> f64 {
    let mid = |i: usize| (i as f64 + 0.5) / n as f64;
    match statistic {
        Statistic::Mode => {
            let best = (0..n).max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a))).unwrap_or(0);
            mid(best)
        }
        Statistic::Median => {
            let mut acc = 0.0;
            for (i, &q) in p.iter().enumerate() {
                if acc + q >= 0.5 {
                    return (i as f64 + (0.5 - acc) / q.max(f64::MIN_POSITIVE)) / n as f64;
                }
                acc += q;
            }
            1.0
        }
        Statistic::Mean | Statistic::Raft => p.iter().enumerate().map(|(i, q)| q * mid(i)).sum(),
    }
}

fn mdn_point(pi: &[f64], mu: &[f64], statistic: Statistic) -> f64 {
    match statistic {
        Statistic::Mode => {
            let best = (0..pi.len()).max_by(|&a, &b| pi[a].total_cmp(&pi[b])).unwrap_or(0);
            mu[best]
        }
        _ => pi.iter().zip(mu).map(|(p, m)| p * m).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::EncoderConfig;
    use crate::autodiff::Bindings;

    fn eval(e: &Expr) -> f64 {
        e.evaluate(&Bindings::new()).unwrap().item()
    }

    #[test]
    fn normalizer_examples() {
        let b = SampleBatch::new(vec![vec![1.0], vec![5.0]], vec![0.0, 10.0]).unwrap();
        let s = NormalizerStats::fit(&b, TargetScaling::MinMax).unwrap();
        assert_eq!(s.apply(&b).targets(), &[0.0, 1.0]);
        assert_eq!(s.x_mean, vec![3.0]);
        assert_eq!(s.x_std, vec![2.0]);
        assert_eq!(s.apply_x(&[5.0]), vec![1.0]);
        let c = NormalizerStats::fit(&b, TargetScaling::Centered).unwrap();
        assert_eq!(c.apply(&b).targets(), &[-0.5, 0.5]);
        let flat = SampleBatch::new(vec![vec![1.0], vec![1.0]], vec![2.0, 2.0]).unwrap();
        assert!(matches!(NormalizerStats::fit(&flat, TargetScaling::MinMax), Err(Error::Degenerate(_))));
        let raw = NormalizerStats::fit(&flat, TargetScaling::Raw).unwrap();
        assert_eq!(raw.apply_x(&[1.0]), vec![1.0]);
    }

    #[test]
    fn normalizers_invert() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for scaling in [TargetScaling::MinMax, TargetScaling::Centered, TargetScaling::Raw] {
            let x: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random_range(-9.0..9.0), 4.0]).collect();
            let y: Vec<f64> = (0..50).map(|_| rng.random_range(-100.0..100.0)).collect();
            let b = SampleBatch::new(x, y).unwrap();
            let s = NormalizerStats::fit(&b, scaling).unwrap();
            for (r, &t) in b.features().iter().zip(b.targets()) {
                let back = s.invert_x(&s.apply_x(r));
                assert!(back.iter().zip(r).all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs().max(1.0)));
                assert!((s.invert_y(s.apply_y(t)) - t).abs() <= 1e-12 * t.abs().max(1.0));
            }
            if scaling == TargetScaling::MinMax {
                assert!(s.apply(&b).targets().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    fn const_logits(e: &mut Expr, rows: Vec<Vec<f64>>, b: usize, l: usize) -> Var {
        let v = rows[0].len();
        e.constant(Tensor::new([b, l, v], rows.concat()).unwrap())
    }

    #[test]
    fn token_loss_examples() {
        let mut e = Expr::new();
        let logits = const_logits(&mut e, vec![vec![0.0, 0.0]; 2], 1, 2);
        token_ce_loss(&mut e, logits, &[TokenSeq(vec![1, 0])]).unwrap();
        assert!((eval(&e) - 2.0 * 2f64.ln()).abs() < 1e-15);

        let mut e = Expr::new();
        let logits = const_logits(&mut e, vec![vec![800.0, 0.0], vec![0.0, 800.0]], 1, 2);
        token_ce_loss(&mut e, logits, &[TokenSeq(vec![0, 1])]).unwrap();
        assert!(eval(&e).abs() < 1e-15);

        // two sequences, logits ln(3), 0 at every position
        let mut e = Expr::new();
        let rows = vec![vec![3f64.ln(), 0.0]; 4];
        let logits = const_logits(&mut e, rows, 2, 2);
        token_ce_loss(&mut e, logits, &[TokenSeq(vec![0, 0]), TokenSeq(vec![0, 1])]).unwrap();
        let hand = (2.0 * -(0.75f64.ln()) + (-(0.75f64.ln()) - 0.25f64.ln())) / 2.0;
        assert!((eval(&e) - hand).abs() < 1e-14);

        let mut e = Expr::new();
        let logits = const_logits(&mut e, vec![vec![0.0, 0.0]; 2], 1, 2);
        assert!(matches!(token_ce_loss(&mut e, logits, &[TokenSeq(vec![0])]), Err(Error::Usage(_))));
    }

    #[test]
    fn other_loss_examples() {
        let mut e = Expr::new();
        let l = e.constant(Tensor::zeros([3, 4]));
        riemann_ce_loss(&mut e, l, &[0, 3, 2]).unwrap();
        assert!((eval(&e) - 4f64.ln()).abs() < 1e-15);
        let mut e = Expr::new();
        let l = e.constant(Tensor::zeros([1, 4]));
        assert!(matches!(riemann_ce_loss(&mut e, l, &[4]), Err(Error::Usage(_))));

        let mut e = Expr::new();
        let p = e.constant(Tensor::new([3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        mse_loss(&mut e, p, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(eval(&e), 0.0);

        let mut e = Expr::new();
        let log_pi = e.constant(Tensor::zeros([1, 1]));
        let mu = e.constant(Tensor::full([1, 1], 0.3));
        let sigma = e.constant(Tensor::full([1, 1], 1.0));
        mdn_nll_loss(&mut e, MdnVars { log_pi, mu, sigma }, &[0.3]).unwrap();
        assert!((eval(&e) - HALF_LN_2PI).abs() < 1e-15);
    }

    fn linear_batch(n: usize, seed: u64) -> SampleBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let y = x.iter().map(|r| 3.0 * r[0]).collect();
        SampleBatch::new(x, y).unwrap()
    }

    fn pointwise() -> ModelConfig {
        ModelConfig { encoder: EncoderConfig::new(1).with_size(2, 16), head: HeadConfig::Pointwise { sigmoid: false } }
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let b = linear_batch(20, 0);
        let m = RegressionModel::new(pointwise(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let cfg = TrainConfig { max_epochs: 0, ..Default::default() };
        let (out, h) = fit(m.clone(), &b, &cfg).unwrap();
        assert_eq!(out.params().snapshot(), m.params().snapshot());
        assert!(h.epochs.is_empty());
    }

    #[test]
    fn linear_target_is_learned_and_runs_are_reproducible() {
        let b = linear_batch(1000, 3);
        let cfg = TrainConfig { learning_rate: 1e-3, seed: 5, ..Default::default() };
        let (r, h) = Regressor::fit(pointwise(), &b, &cfg).unwrap();
        let scaled = r.stats.apply(&b);
        let mse = evaluate_loss(&r.model, &scaled).unwrap();
        assert!(mse < 1e-3, "{mse}");
        let (_, h2) = Regressor::fit(pointwise(), &b, &cfg).unwrap();
        assert_eq!(h, h2);
        // best-epoch restoration
        let best = h.best_epoch.unwrap();
        for rec in &h.epochs[best..] {
            assert!(h.epochs[best].val_loss <= rec.val_loss);
        }
    }

    #[test]
    fn small_step_decreases_loss() {
        let b = linear_batch(40, 9);
        for head in [
            HeadConfig::Pointwise { sigmoid: true },
            HeadConfig::Riemann { bins: 8 },
            HeadConfig::Mdn { mixtures: 2 },
            HeadConfig::Decoder { decoder: crate::heads::DecoderConfig::benchmark(), scheme: TokenScheme::normalized(2, 3).unwrap() },
        ] {
            let cfg = ModelConfig { encoder: EncoderConfig::new(1).with_size(2, 8), head };
            let stats = NormalizerStats::fit(&b, TargetScaling::for_head(&cfg.head)).unwrap();
            let scaled = stats.apply(&b);
            let m = RegressionModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            let before = evaluate_loss(&m, &scaled).unwrap();
            let tc = TrainConfig { learning_rate: 1e-5, max_epochs: 1, validation_fraction: 0.05, ..Default::default() };
            let (after_model, _) = fit(m, &scaled, &tc).unwrap();
            let after = evaluate_loss(&after_model, &scaled).unwrap();
            assert!(after <= before, "{before} -> {after}");
        }
    }

    #[test]
    fn nan_loss_reports_epoch_and_batch() {
        let b = linear_batch(20, 1);
        let mut m = RegressionModel::new(pointwise(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        m.params_mut().get_mut("head.b").unwrap().data_mut()[0] = f64::NAN;
        let err = fit(m, &b, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { epoch: 0, batch: 0, .. }), "{err}");
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (a, b) = split_indices(100, 0.1, 4);
        assert_eq!((a.len(), b.len()), (90, 10));
        assert_eq!(split_indices(100, 0.1, 4), (a.clone(), b.clone()));
        let mut all: Vec<usize> = a.into_iter().chain(b).collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn riemann_bins_and_points() {
        assert_eq!(riemann_bin(0.0, 4), 0);
        assert_eq!(riemann_bin(0.26, 4), 1);
        assert_eq!(riemann_bin(1.0, 4), 3);
        let p = [0.25; 4];
        assert!((riemann_point(&p, 4, Statistic::Mean) - 0.5).abs() < 1e-15);
        assert!((riemann_point(&p, 4, Statistic::Median) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn samples_stay_in_target_range() {
        let b = linear_batch(50, 2);
        let heads = [
            HeadConfig::Riemann { bins: 8 },
            HeadConfig::Mdn { mixtures: 3 },
            HeadConfig::Decoder { decoder: Default::default(), scheme: TokenScheme::normalized(2, 4).unwrap() },
        ];
        for head in heads {
            let config = ModelConfig { encoder: EncoderConfig::new(1).with_size(2, 8), head };
            let scaling = TargetScaling::for_head(&config.head);
            let model = RegressionModel::new(config, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let reg = Regressor { model, stats: NormalizerStats::fit(&b, scaling).unwrap() };
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let ys = reg.sample(b.features(), &SamplerConfig::default(), &mut rng).unwrap();
            assert_eq!(ys.len(), b.len());
            if scaling == TargetScaling::MinMax {
                assert!(ys.iter().all(|&y| y >= reg.stats.y_min && y <= reg.stats.y_max), "{ys:?}");
            }
        }
    }
}
