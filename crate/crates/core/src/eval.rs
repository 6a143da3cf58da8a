//! Regression metrics, continuous NLL, and the histogram risk machinery.
//!
//! The risk side follows one recipe: a known density `f` on `[0, 1]`, an
//! estimator that is piecewise constant on `2^k` equal bins, and the mean
//! integrated squared error between them. [`theoretical_risk`] gives the
//! asymptotic bias and variance terms to compare against.

use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::decoding::{exact_distribution, sequence_log_probs, ConditionedDecoder};
use crate::error::{Error, Result};
use crate::heads::{DecoderConfig, EncoderConfig, HeadConfig, ModelConfig, RegressionModel};
use crate::tokenizer::{BinPoint, TokenScheme};
use crate::training::{encode_targets, fit, riemann_bin, SampleBatch, TrainConfig, HALF_LN_2PI};

/// Tau-b rank correlation, `O(n log n)` (Knight's merge-sort method).
pub fn kendall_tau(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair(preds, targets)?;
    let n = preds.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| preds[i].total_cmp(&preds[j]).then(targets[i].total_cmp(&targets[j])));

    let pairs = |t: u64| t * (t - 1) / 2;
    let mut tied_x = 0u64;
    let mut tied_xy = 0u64;
    let (mut run_x, mut run_xy) = (1u64, 1u64);
    for w in idx.windows(2) {
        let (a, b) = (w[0], w[1]);
        if preds[a] == preds[b] {
            run_x += 1;
            if targets[a] == targets[b] {
                run_xy += 1;
            } else {
                tied_xy += pairs(run_xy);
                run_xy = 1;
            }
        } else {
            tied_x += pairs(run_x);
            tied_xy += pairs(run_xy);
            run_x = 1;
            run_xy = 1;
        }
    }
    tied_x += pairs(run_x);
    tied_xy += pairs(run_xy);

    let mut ys: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
    let mut buf = ys.clone();
    let swaps = count_inversions(&mut ys, &mut buf);
    let mut tied_y = 0u64;
    let mut run = 1u64;
    for w in ys.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            tied_y += pairs(run);
            run = 1;
        }
    }
    tied_y += pairs(run);

    let total = pairs(n as u64);
    tau_from_counts(
        total as f64 - tied_x as f64 - tied_y as f64 + tied_xy as f64 - 2.0 * swaps as f64,
        total,
        tied_x,
        tied_y,
    )
}

/// Reference tau-b by direct pair counting, `O(n²)`.
pub fn kendall_tau_pairs(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair(preds, targets)?;
    let n = preds.len();
    let (mut score, mut tied_x, mut tied_y) = (0i64, 0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = preds[i].total_cmp(&preds[j]) as i64;
            let dy = targets[i].total_cmp(&targets[j]) as i64;
            score += dx * dy;
            tied_x += u64::from(dx == 0);
            tied_y += u64::from(dy == 0);
        }
    }
    tau_from_counts(score as f64, (n * (n - 1) / 2) as u64, tied_x, tied_y)
}

fn tau_from_counts(score: f64, total: u64, tied_x: u64, tied_y: u64) -> Result<f64> {
    if tied_x == total || tied_y == total {
        return Err(Error::Degenerate("Kendall tau is undefined when one input is constant".into()));
    }
    let denom = ((total - tied_x) as f64 * (total - tied_y) as f64).sqrt();
    Ok((score / denom).clamp(-1.0, 1.0))
}

fn count_inversions(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (l, r) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        count_inversions(l, bl) + count_inversions(r, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

fn check_pair(preds: &[f64], targets: &[f64]) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(Error::Usage(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    if preds.len() < 2 {
        return Err(Error::Usage(format!("need at least 2 points, got {}", preds.len())));
    }
    if preds.iter().chain(targets).any(|v| v.is_nan()) {
        return Err(Error::Range("NaN in metric input".into()));
    }
    Ok(())
}

/// Mean squared error divided by the (population) target variance, so the
/// constant-mean predictor scores 1.
pub fn relative_mse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair(preds, targets)?;
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::Degenerate("relative MSE is undefined for constant targets".into()));
    }
    let mse = preds.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
    Ok(mse / var)
}

/// Per-row continuous NLL of already-scaled targets. Zero-probability rows
/// come back as `+∞`.
pub fn continuous_nll(model: &RegressionModel, phi: &Tensor, y: &[f64]) -> Result<Vec<f64>> {
    if phi.shape()[0] != y.len() {
        return Err(Error::Usage(format!("{} feature rows for {} targets", phi.shape()[0], y.len())));
    }
    match &model.config().head {
        HeadConfig::Decoder { scheme, .. } => {
            if matches!(scheme, TokenScheme::Repetition(_)) {
                return Err(Error::Usage("continuous NLL needs a scheme without repetition".into()));
            }
            let seqs = encode_targets(scheme, y)?;
            let dec = ConditionedDecoder::new(model, phi.clone())?;
            let ctx: Vec<usize> = (0..y.len()).collect();
            let lp = sequence_log_probs(&dec, scheme, &ctx, &seqs)?;
            seqs.iter()
                .zip(lp)
                .map(|(s, l)| Ok(-(l - scheme.bin_width(s)?.ln())))
                .collect()
        }
        HeadConfig::Riemann { bins } => {
            let probs = model.riemann_probs(phi)?;
            Ok(y.iter()
                .enumerate()
                .map(|(i, &v)| -(probs.row(i)[riemann_bin(v, *bins)] * *bins as f64).ln())
                .collect())
        }
        HeadConfig::Mdn { .. } => {
            let p = model.mdn_params(phi)?;
            Ok(y.iter()
                .enumerate()
                .map(|(i, &v)| mixture_nll(p.pi.row(i), p.mu.row(i), p.sigma.row(i), v))
                .collect())
        }
        HeadConfig::Pointwise { .. } => Err(Error::Usage("a pointwise head has no density".into())),
    }
}

fn mixture_nll(pi: &[f64], mu: &[f64], sigma: &[f64], y: f64) -> f64 {
    let terms: Vec<f64> = (0..pi.len())
        .map(|m| pi[m].ln() - sigma[m].ln() - HALF_LN_2PI - 0.5 * ((y - mu[m]) / sigma[m]).powi(2))
        .collect();
    let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return f64::INFINITY;
    }
    -(top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln())
}

/// Mean and spread of finite NLLs; infinite ones are only counted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllSummary {
    pub mean: f64,
    pub std: f64,
    pub finite: usize,
    pub infinite: usize,
}

impl NllSummary {
    pub fn from_values(values: &[f64]) -> Self {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let (mean, std) = mean_std(&finite, 0);
        NllSummary { mean, std, finite: finite.len(), infinite: values.len() - finite.len() }
    }
}

/// Mean and standard deviation with `ddof` degrees of freedom removed.
/// Empty input gives NaN; too few points give a zero spread.
pub fn mean_std(v: &[f64], ddof: usize) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() <= ddof {
        return (mean, 0.0);
    }
    let ss = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
    (mean, (ss / (n - ddof as f64)).sqrt())
}

/// A density on `[0, 1]` with its derivative and a sampler.
pub trait Density1D: Send + Sync {
    fn name(&self) -> String;
    fn pdf(&self, y: f64) -> f64;
    fn derivative(&self, y: f64) -> f64;
    /// One draw in `[0, 1)`.
    fn sample(&self, rng: &mut dyn RngCore) -> f64;
}

/// Checks `∫₀¹ pdf = 1` within `1e-6`.
pub fn check_density(f: &dyn Density1D) -> Result<()> {
    let mass = integrate_composite(&|y| f.pdf(y), 0.0, 1.0, 64, &GaussLegendre::new(16));
    if (mass - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("{} integrates to {mass}, not 1", f.name())));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Uniform;

impl Density1D for Uniform {
    fn name(&self) -> String {
        "uniform".into()
    }

    fn pdf(&self, y: f64) -> f64 {
        if (0.0..=1.0).contains(&y) {
            1.0
        } else {
            0.0
        }
    }

    fn derivative(&self, _y: f64) -> f64 {
        0.0
    }

    fn sample(&self, rng: &mut dyn RngCore) -> f64 {
        rng.random::<f64>()
    }
}

/// `N(μ, σ²)` restricted to `[0, 1]` and renormalized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncatedGaussian {
    mu: f64,
    sigma: f64,
    mass: f64,
}

impl TruncatedGaussian {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite() && mu.is_finite()) {
            return Err(Error::Config(format!("truncated Gaussian needs finite mu and sigma > 0, got ({mu}, {sigma})")));
        }
        let z = |y: f64| (y - mu) / (sigma * std::f64::consts::SQRT_2);
        let mass = 0.5 * (libm::erf(z(1.0)) - libm::erf(z(0.0)));
        if mass < 1e-9 {
            return Err(Error::Config(format!("N({mu}, {sigma}²) has almost no mass on [0, 1]")));
        }
        let f = TruncatedGaussian { mu, sigma, mass };
        check_density(&f)?;
        Ok(f)
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Gaussian mass inside `[0, 1]`.
    pub fn mass(&self) -> f64 {
        self.mass
    }
}

impl Density1D for TruncatedGaussian {
    fn name(&self) -> String {
        format!("truncated_gaussian(mu={}, sigma={})", self.mu, self.sigma)
    }

    fn pdf(&self, y: f64) -> f64 {
        if !(0.0..=1.0).contains(&y) {
            return 0.0;
        }
        let z = (y - self.mu) / self.sigma;
        (-0.5 * z * z).exp() / ((2.0 * std::f64::consts::PI).sqrt() * self.sigma * self.mass)
    }

    fn derivative(&self, y: f64) -> f64 {
        -(y - self.mu) / (self.sigma * self.sigma) * self.pdf(y)
    }

    fn sample(&self, rng: &mut dyn RngCore) -> f64 {
        let normal = Normal::new(self.mu, self.sigma).expect("validated sigma");
        loop {
            let y = normal.sample(rng);
            if (0.0..1.0).contains(&y) {
                return y;
            }
        }
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(degree: usize) -> Self {
        assert!(degree >= 1, "quadrature degree must be positive");
        let n = degree;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp;
            loop {
                let (mut p1, mut p2) = (1.0, 0.0);
                for j in 1..=n {
                    let p3 = p2;
                    p2 = p1;
                    p1 = ((2 * j - 1) as f64 * z * p2 - (j - 1) as f64 * p3) / j as f64;
                }
                dp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
                let prev = z;
                z = prev - p1 / dp;
                if (z - prev).abs() < 1e-15 {
                    break;
                }
            }
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            let w = 2.0 / ((1.0 - z * z) * dp * dp);
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        GaussLegendre { nodes, weights }
    }

    pub fn degree(&self) -> usize {
        self.nodes.len()
    }

    pub fn integrate(&self, f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        let (half, mid) = (0.5 * (b - a), 0.5 * (a + b));
        half * self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(mid + half * x)).sum::<f64>()
    }
}

impl Default for GaussLegendre {
    fn default() -> Self {
        GaussLegendre::new(16)
    }
}

fn integrate_composite(f: &dyn Fn(f64) -> f64, a: f64, b: f64, panels: usize, q: &GaussLegendre) -> f64 {
    let h = (b - a) / panels as f64;
    (0..panels).map(|i| q.integrate(f, a + i as f64 * h, a + (i + 1) as f64 * h)).sum()
}

/// Adaptive Simpson quadrature to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 48)
}

/// Bin probabilities of `samples ⊂ [0, 1)` over `2^k` equal bins.
pub fn histogram_mle(samples: &[f64], k: u32) -> Result<Vec<f64>> {
    let counts = histogram_counts(samples, k)?;
    let n = samples.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Bin counts behind [`histogram_mle`].
pub fn histogram_counts(samples: &[f64], k: u32) -> Result<Vec<u64>> {
    if samples.is_empty() {
        return Err(Error::Usage("histogram of an empty sample set".into()));
    }
    if k > 30 {
        return Err(Error::Range(format!("k = {k} bins is too fine; at most 30 supported")));
    }
    let bins = 1usize << k;
    let mut counts = vec![0u64; bins];
    for &y in samples {
        if !(0.0..1.0).contains(&y) {
            return Err(Error::Range(format!("sample {y} is outside [0, 1)")));
        }
        counts[(y * bins as f64) as usize] += 1;
    }
    Ok(counts)
}

/// Sums adjacent groups so `probs` ends up with `target` equal bins.
pub fn coarsen(probs: &[f64], target: usize) -> Result<Vec<f64>> {
    if target == 0 || probs.len() % target != 0 {
        return Err(Error::Usage(format!("cannot coarsen {} bins into {target}", probs.len())));
    }
    Ok(probs.chunks(probs.len() / target).map(|c| c.iter().sum()).collect())
}

/// `∫₀¹ (f − f̂)²` for a piecewise-constant `heights` on equal bins, with
/// per-bin Gauss-Legendre quadrature (each bin split into at least 64/`bins`
/// panels).
pub fn mise(f: &dyn Density1D, heights: &[f64], quad: &GaussLegendre) -> f64 {
    let bins = heights.len();
    let panels = 64usize.div_ceil(bins).max(1);
    let w = 1.0 / bins as f64;
    heights
        .iter()
        .enumerate()
        .map(|(j, &h)| integrate_composite(&|y| (f.pdf(y) - h).powi(2), j as f64 * w, (j + 1) as f64 * w, panels, quad))
        .sum::<f64>()
        .max(0.0)
}

/// Histogram heights (densities) from bin probabilities.
pub fn heights(probs: &[f64]) -> Vec<f64> {
    let n = probs.len() as f64;
    probs.iter().map(|p| p * n).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskTerms {
    pub bias: f64,
    pub variance: f64,
}

impl RiskTerms {
    pub fn total(&self) -> f64 {
        self.bias + self.variance
    }
}

/// `∫₀¹ f′²` by adaptive Simpson (tolerance `1e-8`).
pub fn roughness(f: &dyn Density1D) -> f64 {
    adaptive_simpson(&|y| f.derivative(y).powi(2), 0.0, 1.0, 1e-8)
}

/// Asymptotic risk of the `2^k`-bin histogram from `n` samples:
/// `2^{−2k}/12 · ∫f′²` plus `2^k / n`.
pub fn theoretical_risk(f: &dyn Density1D, k: u32, n: usize) -> RiskTerms {
    theoretical_from_roughness(roughness(f), k, n)
}

fn theoretical_from_roughness(r: f64, k: u32, n: usize) -> RiskTerms {
    let bins = 2f64.powi(k as i32);
    RiskTerms { bias: r / (12.0 * bins * bins), variance: bins / n as f64 }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskEstimator {
    /// Closed-form bin counting, no training.
    #[default]
    Histogram,
    /// Base-2 normalized decoder, marginalized to `k` digits.
    Decoder,
    /// Riemann head with `2^K` bins, coarsened to `2^k`.
    Riemann,
}

impl fmt::Display for RiskEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RiskEstimator::Histogram => "histogram",
            RiskEstimator::Decoder => "decoder",
            RiskEstimator::Riemann => "riemann",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskConfig {
    pub ks: Vec<u32>,
    pub ns: Vec<usize>,
    pub runs: usize,
    pub seed: u64,
    pub estimator: RiskEstimator,
    /// Used by the trained estimators only.
    pub train: TrainConfig,
    pub decoder: DecoderConfig,
    pub encoder_hidden: usize,
    /// Gauss-Legendre degree per panel.
    pub quadrature: usize,
}

impl Default for RiskConfig {
    fn default() -> Self {
        RiskConfig {
            ks: (1..=10).collect(),
            ns: vec![1024, 16384],
            runs: 10,
            seed: 0,
            estimator: RiskEstimator::Histogram,
            train: TrainConfig::default(),
            decoder: DecoderConfig::benchmark(),
            encoder_hidden: 32,
            quadrature: 16,
        }
    }
}

impl RiskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ns.is_empty() {
            return Err(Error::Config("risk.ks and risk.ns must be nonempty".into()));
        }
        if self.runs == 0 {
            return Err(Error::Config("risk.runs must be >= 1".into()));
        }
        if let Some(k) = self.ks.iter().find(|&&k| k > 20) {
            return Err(Error::Config(format!("risk.ks contains {k}; at most 20 supported")));
        }
        if self.ns.contains(&0) || (self.estimator != RiskEstimator::Histogram && self.ns.contains(&1)) {
            return Err(Error::Config("risk.ns entries must be >= 1 (>= 2 for trained estimators)".into()));
        }
        if self.quadrature < 8 {
            return Err(Error::Config(format!("risk.quadrature must be >= 8, got {}", self.quadrature)));
        }
        if self.estimator == RiskEstimator::Decoder && *self.ks.iter().max().unwrap() > 14 {
            return Err(Error::Config("decoder risk enumerates 2^k sequences; keep k <= 14".into()));
        }
        self.train.validate()
    }
}

/// One `(k, n, run)` measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskRecord {
    pub k: u32,
    pub n: usize,
    pub run: usize,
    pub empirical: f64,
}

/// Aggregate over runs at one `(k, n)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskCell {
    pub k: u32,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation over runs (0 for a single run).
    pub std: f64,
    pub bias: f64,
    pub variance: f64,
}

impl RiskCell {
    pub fn theoretical(&self) -> f64 {
        self.bias + self.variance
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub density: String,
    pub estimator: RiskEstimator,
    pub roughness: f64,
    pub cells: Vec<RiskCell>,
    pub records: Vec<RiskRecord>,
}

impl RiskReport {
    pub fn cell(&self, k: u32, n: usize) -> Option<&RiskCell> {
        self.cells.iter().find(|c| c.k == k && c.n == n)
    }

    /// `k` with the smallest mean empirical risk at sample size `n`.
    pub fn argmin_k(&self, n: usize) -> Option<u32> {
        self.cells.iter().filter(|c| c.n == n).min_by(|a, b| a.mean.total_cmp(&b.mean)).map(|c| c.k)
    }
}

/// Runs the `(k, n)` sweep. Each `(n, run)` pair draws its own sample from an
/// independent stream and, for trained estimators, fits one model at the
/// finest `k` that every coarser `k` is read from.
pub fn risk_experiment(f: &dyn Density1D, cfg: &RiskConfig) -> Result<RiskReport> {
    cfg.validate()?;
    let r = roughness(f);
    let quad = GaussLegendre::new(cfg.quadrature);
    let jobs: Vec<(usize, usize)> = (0..cfg.ns.len()).flat_map(|ni| (0..cfg.runs).map(move |run| (ni, run))).collect();
    let results: Vec<Result<Vec<RiskRecord>>> = jobs
        .par_iter()
        .map(|&(ni, run)| {
            let n = cfg.ns[ni];
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream((ni * cfg.runs + run) as u64 + 1);
            let samples: Vec<f64> = (0..n).map(|_| f.sample(&mut rng)).collect();
            let fine = *cfg.ks.iter().max().unwrap();
            let probs_at = estimator_probs(cfg, &samples, fine, (ni * cfg.runs + run) as u64)?;
            cfg.ks
                .iter()
                .map(|&k| {
                    let probs = match &probs_at {
                        Some(p) => coarsen(p, 1 << k)?,
                        None => histogram_mle(&samples, k)?,
                    };
                    Ok(RiskRecord { k, n, run, empirical: mise(f, &heights(&probs), &quad) })
                })
                .collect()
        })
        .collect();
    let mut records = Vec::with_capacity(jobs.len() * cfg.ks.len());
    for r in results {
        records.extend(r?);
    }

    let mut cells = Vec::new();
    for &n in &cfg.ns {
        for &k in &cfg.ks {
            let v: Vec<f64> = records.iter().filter(|r| r.k == k && r.n == n).map(|r| r.empirical).collect();
            let (mean, std) = mean_std(&v, 1);
            let t = theoretical_from_roughness(r, k, n);
            cells.push(RiskCell { k, n, mean, std, bias: t.bias, variance: t.variance });
        }
    }
    Ok(RiskReport { density: f.name(), estimator: cfg.estimator, roughness: r, cells, records })
}

/// Bin probabilities at `2^fine` bins from a trained estimator, or `None`
/// for the closed-form histogram.
fn estimator_probs(cfg: &RiskConfig, samples: &[f64], fine: u32, job: u64) -> Result<Option<Vec<f64>>> {
    let head = match cfg.estimator {
        RiskEstimator::Histogram => return Ok(None),
        RiskEstimator::Decoder => HeadConfig::Decoder { decoder: cfg.decoder.clone(), scheme: TokenScheme::normalized(2, fine as usize)? },
        RiskEstimator::Riemann => HeadConfig::Riemann { bins: 1 << fine },
    };
    let model_cfg = ModelConfig { encoder: EncoderConfig::new(1).with_size(2, cfg.encoder_hidden), head };
    let batch = SampleBatch::new(vec![vec![0.0]; samples.len()], samples.to_vec())?;
    let seed = cfg.seed.wrapping_add(job.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let model = RegressionModel::new(model_cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let train = TrainConfig { seed, ..cfg.train.clone() };
    let (model, _) = fit(model, &batch, &train)?;
    let phi = model.encode_features(&Tensor::new([1, 1], vec![0.0])?)?;
    match cfg.estimator {
        RiskEstimator::Decoder => decoder_bin_probs(&model, phi, fine).map(Some),
        _ => Ok(Some(model.riemann_probs(&phi)?.row(0).to_vec())),
    }
}

/// Exact `2^k`-bin marginal of a base-2 normalized decoder at one feature
/// row, by enumerating every sequence.
pub fn decoder_bin_probs(model: &RegressionModel, phi: Tensor, k: u32) -> Result<Vec<f64>> {
    let scheme = model.scheme().ok_or_else(|| Error::Usage("model has no decoder head".into()))?.clone();
    if !scheme.is_normalized() || matches!(scheme, TokenScheme::Repetition(_)) {
        return Err(Error::Usage(format!("bin marginals need a plain normalized scheme, got {scheme}")));
    }
    let dec = ConditionedDecoder::new(model, phi)?;
    let bins = 1usize << k;
    let mut probs = vec![0.0; bins];
    for (seq, p) in exact_distribution(&dec, 0, &scheme)? {
        let left = scheme.decode_with(&seq, BinPoint::Left)?;
        probs[((left * bins as f64) as usize).min(bins - 1)] += p;
    }
    Ok(probs)
}

/// Draws `n` samples; handy for callers that want raw data.
pub fn draw(f: &dyn Density1D, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| f.sample(rng)).collect()
}
