//! Constrained sampling, beam search, enumeration and point estimators.
//!
//! Everything here talks to a [`TokenModel`], which returns next-token logits
//! for a batch of `(context, prefix)` rows. [`ConditionedDecoder`] adapts a
//! trained decoder head plus a matrix of features; [`FnModel`] wraps a plain
//! closure and is handy for oracles.
//!
//! Next-token distributions are always restricted to
//! [`TokenScheme::valid_next_tokens`] first. Sampling then applies
//! temperature, top-k and top-p, in that order, and renormalizes.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::autodiff::{Bindings, Expr, Tensor};
use crate::error::{Error, Result};
use crate::heads::{DecoderCache, RegressionModel};
use crate::tokenizer::{TokenScheme, TokenSeq};

/// Rows evaluated per model call while sampling.
pub const SAMPLE_CHUNK: usize = 4096;

/// Largest number of valid sequences [`exact_distribution`] will enumerate.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// Grid size used by RAFT on normalized schemes too large to enumerate.
pub const RAFT_DEFAULT_GRID: usize = 1024;

/// Source of next-token logits.
pub trait TokenModel {
    fn vocab_size(&self) -> usize;

    /// `[n, V]` logits; row `i` conditions on `contexts[i]` and `prefixes[i]`.
    /// All prefixes share one length.
    fn next_logits(&self, contexts: &[usize], prefixes: &[Vec<usize>]) -> Result<Tensor>;

    /// Cached step-by-step state for `contexts`, if the model has one.
    fn cache(&self, _contexts: &[usize]) -> Result<Option<DecoderCache<'_>>> {
        Ok(None)
    }

    /// `[n, L, V]` logits for every position of each full sequence.
    fn sequence_logits(&self, contexts: &[usize], seqs: &[Vec<usize>]) -> Result<Tensor> {
        let len = seqs.first().map_or(0, Vec::len);
        let v = self.vocab_size();
        let mut out = vec![0.0; seqs.len() * len * v];
        for t in 0..len {
            let prefixes: Vec<Vec<usize>> = seqs.iter().map(|s| s[..t].to_vec()).collect();
            let logits = self.next_logits(contexts, &prefixes)?;
            for i in 0..seqs.len() {
                out[(i * len + t) * v..(i * len + t + 1) * v].copy_from_slice(logits.row(i));
            }
        }
        Tensor::new([seqs.len(), len.max(1), v], out)
    }
}

/// A trained decoder head evaluated on fixed feature rows `φ: [C, d]`.
pub struct ConditionedDecoder<'a> {
    model: &'a RegressionModel,
    phi: Tensor,
}

impl<'a> ConditionedDecoder<'a> {
    pub fn new(model: &'a RegressionModel, phi: Tensor) -> Result<Self> {
        if model.scheme().is_none() {
            return Err(Error::Usage(format!("{} head cannot decode tokens", model.config().head.name())));
        }
        if phi.shape().len() != 2 {
            return Err(Error::Usage(format!("features must be a matrix, got {:?}", phi.shape())));
        }
        Ok(ConditionedDecoder { model, phi })
    }

    pub fn scheme(&self) -> &TokenScheme {
        self.model.scheme().expect("checked at construction")
    }

    pub fn num_contexts(&self) -> usize {
        self.phi.shape()[0]
    }

    fn gather(&self, contexts: &[usize]) -> Result<Tensor> {
        let d = self.phi.last_dim();
        let mut data = Vec::with_capacity(contexts.len() * d);
        for &c in contexts {
            if c >= self.num_contexts() {
                return Err(Error::Usage(format!("context {c} out of range")));
            }
            data.extend_from_slice(self.phi.row(c));
        }
        Tensor::new([contexts.len(), d], data)
    }
}

impl TokenModel for ConditionedDecoder<'_> {
    fn vocab_size(&self) -> usize {
        self.scheme().vocab_size()
    }

    fn next_logits(&self, contexts: &[usize], prefixes: &[Vec<usize>]) -> Result<Tensor> {
        self.model.decoder_next_logits(&self.gather(contexts)?, prefixes)
    }

    fn cache(&self, contexts: &[usize]) -> Result<Option<DecoderCache<'_>>> {
        self.model.decoder_cache(&self.gather(contexts)?).map(Some)
    }

    fn sequence_logits(&self, contexts: &[usize], seqs: &[Vec<usize>]) -> Result<Tensor> {
        let inputs: Vec<Vec<usize>> = seqs.iter().map(|s| s[..s.len().saturating_sub(1)].to_vec()).collect();
        let mut e = Expr::new();
        let phi = e.constant(self.gather(contexts)?);
        let out = self.model.build_decoder(&mut e, phi, &inputs)?;
        e.set_root(out);
        let mut b = Bindings::new();
        self.model.params().bind_into(&mut b);
        let mut values = e.forward(&b)?;
        Ok(values.swap_remove(out.index()).into_owned())
    }
}

/// Logits from a closure of the prefix (the context is ignored).
pub struct FnModel<F> {
    vocab: usize,
    f: F,
}

impl<F: Fn(&[usize]) -> Vec<f64>> FnModel<F> {
    pub fn new(vocab: usize, f: F) -> Self {
        FnModel { vocab, f }
    }
}

impl<F: Fn(&[usize]) -> Vec<f64>> TokenModel for FnModel<F> {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_logits(&self, _contexts: &[usize], prefixes: &[Vec<usize>]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(prefixes.len() * self.vocab);
        for p in prefixes {
            let row = (self.f)(p);
            if row.len() != self.vocab {
                return Err(Error::Usage(format!("model returned {} logits, expected {}", row.len(), self.vocab)));
            }
            data.extend(row);
        }
        Tensor::new([prefixes.len().max(1), self.vocab], data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
    pub beam_width: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { temperature: 1.0, top_k: None, top_p: None, beam_width: 8, samples: 64, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("sampler.temperature must be > 0, got {}", self.temperature)));
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!("sampler.top_p must be in (0, 1], got {p}")));
            }
        }
        if self.beam_width == 0 {
            return Err(Error::Config("sampler.beam_width must be >= 1".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("sampler.samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Softmax of `logits` restricted to `allowed`, as `(token, probability)`.
pub fn masked_distribution(logits: &[f64], allowed: &[usize], temperature: f64) -> Vec<(usize, f64)> {
    let max = allowed.iter().map(|&t| logits[t] / temperature).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = allowed.iter().map(|&t| (logits[t] / temperature - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    allowed.iter().zip(weights).map(|(&t, w)| (t, w / total)).collect()
}

/// Masked, tempered, top-k / top-p filtered and renormalized next-token
/// distribution. Falls back to the plain masked distribution when the
/// filters leave nothing.
pub fn filtered_distribution(logits: &[f64], allowed: &[usize], cfg: &SamplerConfig) -> Vec<(usize, f64)> {
    let mut dist = masked_distribution(logits, allowed, cfg.temperature);
    dist.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if let Some(k) = cfg.top_k {
        dist.truncate(k);
    }
    if let Some(p) = cfg.top_p {
        let mut acc = 0.0;
        let mut keep = 0;
        for &(_, q) in &dist {
            keep += 1;
            acc += q;
            if acc >= p {
                break;
            }
        }
        dist.truncate(keep);
    }
    let total: f64 = dist.iter().map(|d| d.1).sum();
    if dist.is_empty() || total <= 0.0 {
        return masked_distribution(logits, allowed, 1.0);
    }
    dist.sort_by_key(|d| d.0);
    dist.into_iter().map(|(t, q)| (t, q / total)).collect()
}

fn draw<R: Rng + ?Sized>(dist: &[(usize, f64)], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(t, p) in dist {
        acc += p;
        if u < acc {
            return t;
        }
    }
    dist.last().expect("non-empty distribution").0
}

/// One constrained sample per entry of `contexts`.
pub fn sample_rows<M, R>(
    model: &M,
    scheme: &TokenScheme,
    contexts: &[usize],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<TokenSeq>>
where
    M: TokenModel + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    check_vocab(model, scheme)?;
    let mut out = Vec::with_capacity(contexts.len());
    for chunk in contexts.chunks(SAMPLE_CHUNK) {
        let mut prefixes: Vec<Vec<usize>> = vec![Vec::with_capacity(scheme.len()); chunk.len()];
        let mut cache = model.cache(chunk)?;
        for _ in 0..scheme.len() {
            let logits = match cache.as_mut() {
                Some(c) => c.next_logits()?,
                None => model.next_logits(chunk, &prefixes)?,
            };
            for (i, prefix) in prefixes.iter_mut().enumerate() {
                let allowed = scheme.valid_next_tokens(prefix)?;
                let dist = filtered_distribution(logits.row(i), &allowed, cfg);
                prefix.push(draw(&dist, rng));
            }
            if let Some(c) = cache.as_mut() {
                let last: Vec<usize> = prefixes.iter().map(|p| p[p.len() - 1]).collect();
                c.push(&last)?;
            }
        }
        out.extend(prefixes.into_iter().map(TokenSeq));
    }
    Ok(out)
}

pub fn sample_sequences<M, R>(
    model: &M,
    context: usize,
    scheme: &TokenScheme,
    cfg: &SamplerConfig,
    n: usize,
    rng: &mut R,
) -> Result<Vec<TokenSeq>>
where
    M: TokenModel + ?Sized,
    R: Rng + ?Sized,
{
    sample_rows(model, scheme, &vec![context; n], cfg, rng)
}

pub fn sample_sequence<M, R>(
    model: &M,
    context: usize,
    scheme: &TokenScheme,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<TokenSeq>
where
    M: TokenModel + ?Sized,
    R: Rng + ?Sized,
{
    Ok(sample_sequences(model, context, scheme, cfg, 1, rng)?.remove(0))
}

fn check_vocab<M: TokenModel + ?Sized>(model: &M, scheme: &TokenScheme) -> Result<()> {
    if scheme.vocab_size() > model.vocab_size() {
        return Err(Error::Usage(format!(
            "scheme vocabulary {} exceeds model vocabulary {}",
            scheme.vocab_size(),
            model.vocab_size()
        )));
    }
    Ok(())
}

fn masked_log_probs(logits: &[f64], allowed: &[usize]) -> Vec<(usize, f64)> {
    let max = allowed.iter().map(|&t| logits[t]).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + allowed.iter().map(|&t| (logits[t] - max).exp()).sum::<f64>().ln();
    allowed.iter().map(|&t| (t, logits[t] - lse)).collect()
}

/// Prefers higher log-probability, then the lexicographically smaller sequence.
fn better(a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Highest joint-probability sequence kept by a beam of `width`, with its
/// log-probability under the masked distribution.
pub fn beam_search_mode<M: TokenModel + ?Sized>(
    model: &M,
    context: usize,
    scheme: &TokenScheme,
    width: usize,
) -> Result<(TokenSeq, f64)> {
    if width == 0 {
        return Err(Error::Usage("beam width must be >= 1".into()));
    }
    check_vocab(model, scheme)?;
    let mut beams: Vec<(Vec<usize>, f64)> = vec![(vec![], 0.0)];
    for _ in 0..scheme.len() {
        let mut next = Vec::new();
        for chunk in beams.chunks(SAMPLE_CHUNK) {
            let prefixes: Vec<Vec<usize>> = chunk.iter().map(|b| b.0.clone()).collect();
            let logits = model.next_logits(&vec![context; chunk.len()], &prefixes)?;
            for (i, (prefix, lp)) in chunk.iter().enumerate() {
                let allowed = scheme.valid_next_tokens(prefix)?;
                for (t, l) in masked_log_probs(logits.row(i), &allowed) {
                    let mut s = prefix.clone();
                    s.push(t);
                    next.push((s, lp + l));
                }
            }
        }
        next.sort_by(better);
        next.truncate(width);
        beams = next;
    }
    let (seq, lp) = beams.into_iter().next().expect("at least one beam");
    Ok((TokenSeq(seq), lp))
}

/// Beam of width one.
pub fn greedy<M: TokenModel + ?Sized>(model: &M, context: usize, scheme: &TokenScheme) -> Result<TokenSeq> {
    beam_search_mode(model, context, scheme, 1).map(|r| r.0)
}

/// Every mask-valid sequence with its probability, in lexicographic order.
pub fn exact_distribution<M: TokenModel + ?Sized>(
    model: &M,
    context: usize,
    scheme: &TokenScheme,
) -> Result<Vec<(TokenSeq, f64)>> {
    let count = scheme.valid_count();
    if count > ENUMERATION_LIMIT {
        return Err(Error::Usage(format!(
            "{scheme} has {count} valid sequences, more than {ENUMERATION_LIMIT}; use sampling instead"
        )));
    }
    check_vocab(model, scheme)?;
    let mut level: Vec<(Vec<usize>, f64)> = vec![(vec![], 0.0)];
    for _ in 0..scheme.len() {
        let mut next = Vec::with_capacity(level.len() * scheme.vocab_size());
        for chunk in level.chunks(SAMPLE_CHUNK) {
            let prefixes: Vec<Vec<usize>> = chunk.iter().map(|b| b.0.clone()).collect();
            let logits = model.next_logits(&vec![context; chunk.len()], &prefixes)?;
            for (i, (prefix, lp)) in chunk.iter().enumerate() {
                let allowed = scheme.valid_next_tokens(prefix)?;
                for (t, l) in masked_log_probs(logits.row(i), &allowed) {
                    let mut s = prefix.clone();
                    s.push(t);
                    next.push((s, lp + l));
                }
            }
        }
        level = next;
    }
    Ok(level.into_iter().map(|(s, lp)| (TokenSeq(s), lp.exp())).collect())
}

/// Log-probability of each full sequence under the masked distribution.
pub fn sequence_log_probs<M: TokenModel + ?Sized>(
    model: &M,
    scheme: &TokenScheme,
    contexts: &[usize],
    seqs: &[TokenSeq],
) -> Result<Vec<f64>> {
    check_vocab(model, scheme)?;
    let mut out = Vec::with_capacity(seqs.len());
    let pairs: Vec<(usize, Vec<usize>)> = contexts.iter().copied().zip(seqs.iter().map(|s| s.0.clone())).collect();
    if contexts.len() != seqs.len() {
        return Err(Error::Usage(format!("{} contexts for {} sequences", contexts.len(), seqs.len())));
    }
    for chunk in pairs.chunks(SAMPLE_CHUNK) {
        let ctx: Vec<usize> = chunk.iter().map(|p| p.0).collect();
        let rows: Vec<Vec<usize>> = chunk.iter().map(|p| p.1.clone()).collect();
        if rows.iter().any(|r| r.len() != scheme.len()) {
            return Err(Error::Usage(format!("sequences must have {} tokens", scheme.len())));
        }
        let logits = model.sequence_logits(&ctx, &rows)?;
        let v = logits.last_dim();
        for (i, row) in rows.iter().enumerate() {
            let mut lp = 0.0;
            for t in 0..row.len() {
                let allowed = scheme.valid_next_tokens(&row[..t])?;
                if !allowed.contains(&row[t]) {
                    lp = f64::NEG_INFINITY;
                    break;
                }
                let l = &logits.data()[(i * row.len() + t) * v..(i * row.len() + t + 1) * v];
                let lps = masked_log_probs(l, &allowed);
                lp += lps.iter().find(|p| p.0 == row[t]).expect("allowed").1;
            }
            out.push(lp);
        }
    }
    Ok(out)
}

pub fn mean_estimate(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Usage("mean of an empty sample".into()));
    }
    Ok(samples.iter().sum::<f64>() / samples.len() as f64)
}

const BETA_TOL: f64 = 1e-12;
const BETA_MAX_ITER: usize = 100_000;

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    let tiny = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=BETA_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        d = if d.abs() < tiny { tiny } else { d };
        c = 1.0 + aa / c;
        c = if c.abs() < tiny { tiny } else { c };
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        d = if d.abs() < tiny { tiny } else { d };
        c = 1.0 + aa / c;
        c = if c.abs() < tiny { tiny } else { c };
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < BETA_TOL {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)` by continued fraction.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

/// Weights on the order statistics of `n` samples for the median.
pub fn harrell_davis_weights(n: usize) -> Vec<f64> {
    let a = (n as f64 + 1.0) / 2.0;
    let cdf: Vec<f64> = (0..=n).map(|i| regularized_incomplete_beta(i as f64 / n as f64, a, a)).collect();
    cdf.windows(2).map(|w| w[1] - w[0]).collect()
}

pub fn median_harrell_davis(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Usage("median of an empty sample".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let w = harrell_davis_weights(sorted.len());
    Ok(sorted.iter().zip(&w).map(|(y, w)| y * w).sum())
}

/// Evaluation set for the RAFT mean.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RaftGrid {
    /// Every representable value when enumerable, otherwise every value of
    /// the inner scheme, otherwise [`RAFT_DEFAULT_GRID`] bin midpoints of
    /// `[0, 1)` for normalized schemes.
    #[default]
    Auto,
    Points(Vec<f64>),
}

/// `Σ p(y) y / Σ p(y)` over the grid, with `p` the model's sequence probability.
pub fn raft_mean<M: TokenModel + ?Sized>(
    model: &M,
    context: usize,
    scheme: &TokenScheme,
    grid: &RaftGrid,
) -> Result<f64> {
    let points = match grid {
        RaftGrid::Points(p) if p.is_empty() => {
            return Err(Error::Config("RAFT grid is empty".into()));
        }
        RaftGrid::Points(p) => p.clone(),
        RaftGrid::Auto if scheme.valid_count() <= ENUMERATION_LIMIT => {
            let dist = exact_distribution(model, context, scheme)?;
            let mut acc = 0.0;
            for (seq, p) in &dist {
                acc += p * scheme.decode(seq)?;
            }
            return Ok(acc);
        }
        RaftGrid::Auto => auto_grid(scheme)?,
    };
    let mut seqs = Vec::with_capacity(points.len());
    for &y in &points {
        let s = scheme.encode(y).map_err(|e| Error::Config(format!("RAFT grid value {y} is not encodable: {e}")))?;
        seqs.push(s);
    }
    let lps = sequence_log_probs(model, scheme, &vec![context; seqs.len()], &seqs)?;
    let max = lps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Degenerate("model assigns zero mass to every RAFT grid point".into()));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (&y, lp) in points.iter().zip(lps) {
        let w = (lp - max).exp();
        num += w * y;
        den += w;
    }
    Ok(num / den)
}

fn auto_grid(scheme: &TokenScheme) -> Result<Vec<f64>> {
    let inner = scheme.inner();
    if inner.valid_count() <= ENUMERATION_LIMIT {
        let mut values = vec![];
        enumerate_values(inner, &mut vec![], &mut values)?;
        return Ok(values);
    }
    if scheme.is_normalized() {
        let n = RAFT_DEFAULT_GRID;
        return Ok((0..n).map(|i| (i as f64 + 0.5) / n as f64).collect());
    }
    Err(Error::Config(format!("{scheme} is too large to enumerate; supply an explicit RAFT grid")))
}

fn enumerate_values(scheme: &TokenScheme, prefix: &mut Vec<usize>, out: &mut Vec<f64>) -> Result<()> {
    if prefix.len() == scheme.len() {
        out.push(scheme.decode(prefix)?);
        return Ok(());
    }
    for t in scheme.valid_next_tokens(prefix)? {
        prefix.push(t);
        enumerate_values(scheme, prefix, out)?;
        prefix.pop();
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    #[default]
    Mean,
    Median,
    Mode,
    Raft,
}

/// Point estimate for one context. Repetition schemes are majority-vote
/// unwrapped by [`TokenScheme::decode`].
pub fn estimate<M, R>(
    model: &M,
    context: usize,
    scheme: &TokenScheme,
    statistic: Statistic,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<f64>
where
    M: TokenModel + ?Sized,
    R: Rng + ?Sized,
{
    Ok(estimate_many(model, &[context], scheme, statistic, cfg, rng)?[0])
}

/// Point estimates for several contexts, sampling them in shared batches.
pub fn estimate_many<M, R>(
    model: &M,
    contexts: &[usize],
    scheme: &TokenScheme,
    statistic: Statistic,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    M: TokenModel + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    match statistic {
        Statistic::Mean | Statistic::Median => {
            let rows: Vec<usize> = contexts.iter().flat_map(|&c| std::iter::repeat_n(c, cfg.samples)).collect();
            let seqs = sample_rows(model, scheme, &rows, cfg, rng)?;
            let values = seqs.iter().map(|s| scheme.decode(s)).collect::<Result<Vec<f64>>>()?;
            values
                .chunks(cfg.samples)
                .map(|v| match statistic {
                    Statistic::Mean => mean_estimate(v),
                    _ => median_harrell_davis(v),
                })
                .collect()
        }
        Statistic::Mode => contexts
            .iter()
            .map(|&c| scheme.decode(&beam_search_mode(model, c, scheme, cfg.beam_width)?.0))
            .collect(),
        Statistic::Raft => contexts.iter().map(|&c| raft_mean(model, c, scheme, &RaftGrid::Auto)).collect(),
    }
}
