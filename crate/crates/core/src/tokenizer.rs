//! Codecs between real numbers and token sequences.
//!
//! Four schemes are provided:
//!
//! - [`NormalizedScheme`]: base-`B` expansion of `y ∈ [0, 1)` truncated to `K`
//!   digits. Every digit sequence is valid.
//! - [`UnnormalizedScheme`]: `<s><s_e><e_1>…<e_E><m_1>…<m_M>`, a base-`B`
//!   floating-point layout. The leading mantissa digit is non-zero except for
//!   the canonical zero pattern `<+><-><B-1>…<B-1><0>…<0>`.
//! - [`HammingScheme`]: `K`-bit words ordered by (popcount, value); rank `r`
//!   stands for `r / 2^K`.
//! - [`RepetitionScheme`]: any inner scheme emitted `R` times, decoded by a
//!   per-position plurality vote.
//!
//! Decoding to a bin midpoint is the default; the left endpoint is available
//! through [`BinPoint::Left`].

use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest `B^K` (or `B^M`) accepted, so digit strings map exactly onto `f64`.
const MAX_EXACT: u128 = 1 << 53;

/// A sequence of token ids drawn from a scheme's vocabulary.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSeq(pub Vec<usize>);

impl Deref for TokenSeq {
    type Target = [usize];
    fn deref(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for TokenSeq {
    fn from(v: Vec<usize>) -> Self {
        TokenSeq(v)
    }
}

/// Which point of a digit-string's bin is returned on decode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinPoint {
    Left,
    #[default]
    Mid,
}

fn checked_pow(base: u32, exp: usize) -> Option<u128> {
    let mut acc: u128 = 1;
    for _ in 0..exp {
        acc = acc.checked_mul(base as u128)?;
        if acc > MAX_EXACT {
            return None;
        }
    }
    Some(acc)
}

fn digits_of(mut value: u128, base: u32, len: usize) -> Vec<usize> {
    let mut out = vec![0; len];
    for slot in out.iter_mut().rev() {
        *slot = (value % base as u128) as usize;
        value /= base as u128;
    }
    out
}

fn value_of(digits: &[usize], base: u32) -> u128 {
    digits.iter().fold(0u128, |acc, &d| acc * base as u128 + d as u128)
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizedScheme {
    pub base: u32,
    pub length: usize,
}

impl NormalizedScheme {
    pub fn new(base: u32, length: usize) -> Result<Self> {
        let s = NormalizedScheme { base, length };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base < 2 || self.length == 0 {
            return Err(Error::Config(format!(
                "normalized scheme needs base >= 2 and length >= 1, got B={} K={}",
                self.base, self.length
            )));
        }
        if checked_pow(self.base, self.length).is_none() {
            return Err(Error::Config(format!(
                "B^K = {}^{} exceeds 2^53 representable bins",
                self.base, self.length
            )));
        }
        Ok(())
    }

    fn bins(&self) -> u128 {
        checked_pow(self.base, self.length).expect("validated")
    }

    pub fn bin_width(&self) -> f64 {
        1.0 / self.bins() as f64
    }

    /// Digits `d` with `Σ d_i B^{-i} <= y < Σ d_i B^{-i} + B^{-K}`.
    pub fn encode(&self, y: f64) -> Result<TokenSeq> {
        if !(0.0..1.0).contains(&y) {
            return Err(Error::Range(format!("normalized value {y} outside [0, 1)")));
        }
        let bins = self.bins();
        let scale = bins as f64;
        let mut j = ((y * scale).floor() as u128).min(bins - 1);
        while j > 0 && j as f64 / scale > y {
            j -= 1;
        }
        while j + 1 < bins && (j + 1) as f64 / scale <= y {
            j += 1;
        }
        Ok(TokenSeq(digits_of(j, self.base, self.length)))
    }

    fn check(&self, seq: &[usize]) -> Result<()> {
        if seq.len() != self.length {
            return Err(Error::Codec(format!(
                "expected {} tokens, got {}",
                self.length,
                seq.len()
            )));
        }
        if let Some(pos) = seq.iter().position(|&t| t >= self.base as usize) {
            return Err(Error::Codec(format!("token {} at position {pos} is not a digit", seq[pos])));
        }
        Ok(())
    }

    pub fn decode(&self, seq: &[usize], point: BinPoint) -> Result<f64> {
        self.check(seq)?;
        let j = value_of(seq, self.base) as f64;
        let scale = self.bins() as f64;
        Ok(match point {
            BinPoint::Left => j / scale,
            BinPoint::Mid => (2.0 * j + 1.0) / (2.0 * scale),
        })
    }
}

// ---------------------------------------------------------------------------

/// How the two sign positions are spelled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignTokens {
    /// Dedicated `<+>` and `<->` tokens appended after the digits.
    #[default]
    Dedicated,
    /// `<0>` stands for `+`, `<1>` for `-`.
    ReuseDigits,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnnormalizedScheme {
    pub base: u32,
    pub exp_digits: usize,
    pub mantissa_digits: usize,
    #[serde(default)]
    pub signs: SignTokens,
}

/// Decomposed unnormalized value: `sign · mantissa · B^(exponent - (M-1))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Parts {
    negative: bool,
    exponent: i64,
    mantissa: u128,
}

impl UnnormalizedScheme {
    pub fn new(base: u32, exp_digits: usize, mantissa_digits: usize) -> Result<Self> {
        let s = UnnormalizedScheme { base, exp_digits, mantissa_digits, signs: SignTokens::Dedicated };
        s.validate()?;
        Ok(s)
    }

    pub fn with_signs(mut self, signs: SignTokens) -> Self {
        self.signs = signs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.base < 2 || self.exp_digits == 0 || self.mantissa_digits == 0 {
            return Err(Error::Config(format!(
                "unnormalized scheme needs B >= 2, E >= 1, M >= 1, got B={} E={} M={}",
                self.base, self.exp_digits, self.mantissa_digits
            )));
        }
        if checked_pow(self.base, self.mantissa_digits).is_none()
            || checked_pow(self.base, self.exp_digits).is_none()
        {
            return Err(Error::Config("B^M and B^E must not exceed 2^53".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        2 + self.exp_digits + self.mantissa_digits
    }

    pub fn vocab_size(&self) -> usize {
        match self.signs {
            SignTokens::Dedicated => self.base as usize + 2,
            SignTokens::ReuseDigits => self.base as usize,
        }
    }

    pub fn plus(&self) -> usize {
        match self.signs {
            SignTokens::Dedicated => self.base as usize,
            SignTokens::ReuseDigits => 0,
        }
    }

    pub fn minus(&self) -> usize {
        match self.signs {
            SignTokens::Dedicated => self.base as usize + 1,
            SignTokens::ReuseDigits => 1,
        }
    }

    /// Largest exponent magnitude, `B^E - 1`.
    pub fn max_exponent(&self) -> i64 {
        (checked_pow(self.base, self.exp_digits).expect("validated") - 1) as i64
    }

    fn mantissa_floor(&self) -> u128 {
        checked_pow(self.base, self.mantissa_digits - 1).expect("validated")
    }

    fn mantissa_ceil(&self) -> u128 {
        checked_pow(self.base, self.mantissa_digits).expect("validated")
    }

    /// `j · B^(exponent - (M-1))`. Base 10 goes through the correctly rounded
    /// decimal parser; other bases divide by the positive power, which is
    /// exact for powers of two and for small exponents.
    fn scaled(&self, j: u128, exponent: i64) -> f64 {
        let p = (exponent - (self.mantissa_digits as i64 - 1)).clamp(-4000, 4000) as i32;
        if self.base == 10 {
            let v: f64 = format!("{j}e{p}").parse().expect("decimal literal");
            return if v.is_finite() { v } else { f64::MAX };
        }
        let b = self.base as f64;
        let j = j as f64;
        let v = if p >= 0 {
            j * b.powi(p)
        } else {
            let d = b.powi(-p);
            if d.is_finite() {
                j / d
            } else {
                j * b.powi(p / 2) * b.powi(p - p / 2)
            }
        };
        if v.is_finite() {
            v
        } else {
            f64::MAX
        }
    }

    /// Value of one unit in the last mantissa digit.
    fn unit(&self, exponent: i64) -> f64 {
        self.scaled(1, exponent)
    }

    fn magnitude(&self, parts: Parts) -> f64 {
        self.scaled(parts.mantissa, parts.exponent)
    }

    fn zero_parts(&self) -> Parts {
        Parts { negative: false, exponent: -self.max_exponent(), mantissa: 0 }
    }

    /// `floor(log_B |y|)` by repeated multiplication/division, clamped to
    /// one step beyond the representable range.
    fn exponent_of(&self, magnitude: f64) -> i64 {
        let b = self.base as f64;
        let limit = self.max_exponent() + 1;
        let mut m = magnitude;
        let mut e = 0i64;
        while m >= b && e <= limit {
            m /= b;
            e += 1;
        }
        while m < 1.0 && e >= -limit {
            m *= b;
            e -= 1;
        }
        e
    }

    fn parts_of(&self, y: f64) -> Result<Parts> {
        if !y.is_finite() {
            return Err(Error::Range(format!("cannot encode non-finite value {y}")));
        }
        if y == 0.0 {
            return Ok(self.zero_parts());
        }
        let negative = y < 0.0;
        let mag = y.abs();
        let emax = self.max_exponent();
        let (lo, hi) = (self.mantissa_floor(), self.mantissa_ceil());
        let mut e = self.exponent_of(mag);
        if e > emax {
            return Ok(Parts { negative, exponent: emax, mantissa: hi - 1 });
        }
        if e < -emax {
            let smallest = self.magnitude(Parts { negative, exponent: -emax, mantissa: lo });
            if mag < smallest / 2.0 {
                return Ok(self.zero_parts());
            }
            return Ok(Parts { negative, exponent: -emax, mantissa: lo });
        }
        // Settle the mantissa with the same arithmetic decode uses.
        for _ in 0..4 {
            let guess = (mag / self.unit(e)).floor();
            let mut j = if guess.is_finite() { (guess.max(0.0) as u128).min(hi) } else { hi };
            while j > 0 && self.scaled(j, e) > mag {
                j -= 1;
            }
            while j < hi && self.scaled(j + 1, e) <= mag {
                j += 1;
            }
            if j >= hi {
                if e == emax {
                    return Ok(Parts { negative, exponent: emax, mantissa: hi - 1 });
                }
                e += 1;
            } else if j < lo {
                if e == -emax {
                    return Ok(Parts { negative, exponent: -emax, mantissa: lo });
                }
                e -= 1;
            } else {
                return Ok(Parts { negative, exponent: e, mantissa: j });
            }
        }
        Err(Error::Range(format!("could not normalize {y}")))
    }

    pub fn encode(&self, y: f64) -> Result<TokenSeq> {
        let p = self.parts_of(y)?;
        let mut out = Vec::with_capacity(self.len());
        out.push(if p.negative { self.minus() } else { self.plus() });
        out.push(if p.exponent < 0 { self.minus() } else { self.plus() });
        out.extend(digits_of(p.exponent.unsigned_abs() as u128, self.base, self.exp_digits));
        out.extend(digits_of(p.mantissa, self.base, self.mantissa_digits));
        Ok(TokenSeq(out))
    }

    fn is_sign(&self, t: usize) -> bool {
        t == self.plus() || t == self.minus()
    }

    fn is_digit(&self, t: usize) -> bool {
        t < self.base as usize
    }

    fn mantissa_start(&self) -> usize {
        2 + self.exp_digits
    }

    fn token_ok(&self, pos: usize, t: usize) -> bool {
        if pos < 2 {
            self.is_sign(t)
        } else {
            self.is_digit(t)
        }
    }

    fn zero_prefix_ok(&self, prefix: &[usize]) -> bool {
        let top = self.base as usize - 1;
        prefix.first().is_none_or(|&t| t == self.plus())
            && prefix.get(1).is_none_or(|&t| t == self.minus())
            && prefix.iter().skip(2).take(self.exp_digits).all(|&t| t == top)
            && prefix.iter().skip(self.mantissa_start()).all(|&t| t == 0)
    }

    fn parse(&self, seq: &[usize]) -> Result<Parts> {
        if seq.len() != self.len() {
            return Err(Error::Codec(format!("expected {} tokens, got {}", self.len(), seq.len())));
        }
        for (pos, &t) in seq.iter().enumerate() {
            if !self.token_ok(pos, t) {
                return Err(Error::Codec(format!("invalid token {t} at position {pos}")));
            }
        }
        let m_start = self.mantissa_start();
        if seq[m_start] == 0 {
            if self.zero_prefix_ok(seq) {
                return Ok(self.zero_parts());
            }
            return Err(Error::Codec(format!(
                "leading mantissa digit at position {m_start} is zero outside the canonical zero"
            )));
        }
        let magnitude = value_of(&seq[2..m_start], self.base) as i64;
        let exponent = if seq[1] == self.minus() { -magnitude } else { magnitude };
        Ok(Parts {
            negative: seq[0] == self.minus(),
            exponent,
            mantissa: value_of(&seq[m_start..], self.base),
        })
    }

    pub fn decode(&self, seq: &[usize]) -> Result<f64> {
        let p = self.parse(seq)?;
        if p.mantissa == 0 {
            return Ok(0.0);
        }
        let v = self.magnitude(p);
        Ok(if p.negative { -v } else { v })
    }

    /// Width of the value interval the sequence stands for.
    pub fn bin_width(&self, seq: &[usize]) -> Result<f64> {
        let p = self.parse(seq)?;
        Ok(self.unit(p.exponent))
    }

    pub fn valid_next_tokens(&self, prefix: &[usize]) -> Result<Vec<usize>> {
        for (pos, &t) in prefix.iter().enumerate() {
            if !self.token_ok(pos, t) {
                return Err(Error::Codec(format!("invalid token {t} at position {pos}")));
            }
        }
        let pos = prefix.len();
        let m_start = self.mantissa_start();
        let digits = 0..self.base as usize;
        Ok(if pos < 2 {
            vec![self.plus(), self.minus()]
        } else if pos < m_start {
            digits.collect()
        } else if pos == m_start {
            let zero_ok = self.zero_prefix_ok(prefix);
            digits.filter(|&d| d != 0 || zero_ok).collect()
        } else if prefix[m_start] == 0 {
            vec![0]
        } else {
            digits.collect()
        })
    }

    fn valid_count(&self) -> u128 {
        let b = self.base as u128;
        4 * b.pow(self.exp_digits as u32) * (b - 1) * b.pow(self.mantissa_digits as u32 - 1) + 1
    }
}

// ---------------------------------------------------------------------------

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1))
}

/// Word of `bits` bits (MSB first) holding rank `rank` in (popcount, value) order.
pub fn hamming_rank_to_word(rank: u64, bits: usize) -> Result<Vec<u8>> {
    if bits == 0 || bits > 62 || rank >= 1u64 << bits {
        return Err(Error::Range(format!("rank {rank} out of range for {bits} bits")));
    }
    let mut idx = rank as u128;
    let mut ones = 0;
    while idx >= binomial(bits, ones) {
        idx -= binomial(bits, ones);
        ones += 1;
    }
    let mut word = vec![0u8; bits];
    for (i, slot) in word.iter_mut().enumerate() {
        let below = bits - 1 - i;
        let with_zero = binomial(below, ones);
        if idx >= with_zero {
            idx -= with_zero;
            *slot = 1;
            ones -= 1;
        }
    }
    Ok(word)
}

/// Inverse of [`hamming_rank_to_word`].
pub fn hamming_word_to_rank(word: &[u8]) -> Result<u64> {
    let bits = word.len();
    if bits == 0 || bits > 62 || word.iter().any(|&b| b > 1) {
        return Err(Error::Range(format!("not a valid bit word: {word:?}")));
    }
    let popcount = word.iter().filter(|&&b| b == 1).count();
    let mut rank: u128 = (0..popcount).map(|c| binomial(bits, c)).sum();
    let mut ones = popcount;
    for (i, &b) in word.iter().enumerate() {
        if b == 1 {
            rank += binomial(bits - 1 - i, ones);
            ones -= 1;
        }
    }
    Ok(rank as u64)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HammingScheme {
    pub bits: usize,
}

impl HammingScheme {
    pub fn new(bits: usize) -> Result<Self> {
        let s = HammingScheme { bits };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits == 0 || self.bits > 53 {
            return Err(Error::Config(format!("hamming bit length {} outside 1..=53", self.bits)));
        }
        Ok(())
    }

    pub fn bin_width(&self) -> f64 {
        (-(self.bits as f64)).exp2()
    }

    pub fn encode(&self, y: f64) -> Result<TokenSeq> {
        if !(0.0..1.0).contains(&y) {
            return Err(Error::Range(format!("normalized value {y} outside [0, 1)")));
        }
        let rank = (y * (self.bits as f64).exp2()).floor() as u64;
        let word = hamming_rank_to_word(rank, self.bits)?;
        Ok(TokenSeq(word.into_iter().map(usize::from).collect()))
    }

    pub fn decode(&self, seq: &[usize], point: BinPoint) -> Result<f64> {
        if seq.len() != self.bits {
            return Err(Error::Codec(format!("expected {} bits, got {}", self.bits, seq.len())));
        }
        if let Some(pos) = seq.iter().position(|&t| t > 1) {
            return Err(Error::Codec(format!("token {} at position {pos} is not a bit", seq[pos])));
        }
        let word: Vec<u8> = seq.iter().map(|&t| t as u8).collect();
        let rank = hamming_word_to_rank(&word)? as f64;
        let offset = match point {
            BinPoint::Left => 0.0,
            BinPoint::Mid => 0.5,
        };
        Ok((rank + offset) * self.bin_width())
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepetitionScheme {
    pub inner: Box<TokenScheme>,
    pub repeats: usize,
}

impl RepetitionScheme {
    pub fn new(inner: TokenScheme, repeats: usize) -> Result<Self> {
        let s = RepetitionScheme { inner: Box::new(inner), repeats };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeat count must be >= 1".into()));
        }
        if matches!(*self.inner, TokenScheme::Repetition(_)) {
            return Err(Error::Config("nested repetition schemes are not supported".into()));
        }
        self.inner.validate()
    }

    /// Per-position plurality over the repeats; ties go to the token whose
    /// first occurrence is earliest.
    pub fn majority_vote(&self, seq: &[usize]) -> Result<TokenSeq> {
        let inner_len = self.inner.len();
        if seq.len() != inner_len * self.repeats {
            return Err(Error::Codec(format!(
                "expected {} tokens ({} repeats of {inner_len}), got {}",
                inner_len * self.repeats,
                self.repeats,
                seq.len()
            )));
        }
        let voted = (0..inner_len)
            .map(|k| {
                let column: Vec<usize> = (0..self.repeats).map(|r| seq[r * inner_len + k]).collect();
                let mut best = column[0];
                let mut best_count = 0;
                for &t in &column {
                    let c = column.iter().filter(|&&u| u == t).count();
                    if c > best_count {
                        best = t;
                        best_count = c;
                    }
                }
                best
            })
            .collect();
        Ok(TokenSeq(voted))
    }

    /// Voted inner sequence, falling back to the first repeat when the vote
    /// assembles an invalid sequence.
    fn resolve(&self, seq: &[usize]) -> Result<TokenSeq> {
        let voted = self.majority_vote(seq)?;
        if self.inner.is_valid(&voted) {
            return Ok(voted);
        }
        Ok(TokenSeq(seq[..self.inner.len()].to_vec()))
    }
}

// ---------------------------------------------------------------------------

/// A codec between real numbers and token sequences.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenScheme {
    Normalized(NormalizedScheme),
    Unnormalized(UnnormalizedScheme),
    Hamming(HammingScheme),
    Repetition(RepetitionScheme),
}

impl TokenScheme {
    pub fn normalized(base: u32, length: usize) -> Result<Self> {
        NormalizedScheme::new(base, length).map(TokenScheme::Normalized)
    }

    pub fn unnormalized(base: u32, exp_digits: usize, mantissa_digits: usize) -> Result<Self> {
        UnnormalizedScheme::new(base, exp_digits, mantissa_digits).map(TokenScheme::Unnormalized)
    }

    pub fn hamming(bits: usize) -> Result<Self> {
        HammingScheme::new(bits).map(TokenScheme::Hamming)
    }

    pub fn repeated(self, repeats: usize) -> Result<Self> {
        RepetitionScheme::new(self, repeats).map(TokenScheme::Repetition)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TokenScheme::Normalized(s) => s.validate(),
            TokenScheme::Unnormalized(s) => s.validate(),
            TokenScheme::Hamming(s) => s.validate(),
            TokenScheme::Repetition(s) => s.validate(),
        }
    }

    /// Whether targets must lie in `[0, 1)`.
    pub fn is_normalized(&self) -> bool {
        match self {
            TokenScheme::Unnormalized(_) => false,
            TokenScheme::Repetition(r) => r.inner.is_normalized(),
            _ => true,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            TokenScheme::Normalized(s) => s.base as usize,
            TokenScheme::Unnormalized(s) => s.vocab_size(),
            TokenScheme::Hamming(_) => 2,
            TokenScheme::Repetition(s) => s.inner.vocab_size(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TokenScheme::Normalized(s) => s.length,
            TokenScheme::Unnormalized(s) => s.len(),
            TokenScheme::Hamming(s) => s.bits,
            TokenScheme::Repetition(s) => s.inner.len() * s.repeats,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn encode(&self, y: f64) -> Result<TokenSeq> {
        match self {
            TokenScheme::Normalized(s) => s.encode(y),
            TokenScheme::Unnormalized(s) => s.encode(y),
            TokenScheme::Hamming(s) => s.encode(y),
            TokenScheme::Repetition(s) => {
                let inner = s.inner.encode(y)?;
                Ok(TokenSeq(inner.0.repeat(s.repeats)))
            }
        }
    }

    /// Decodes to the bin midpoint (normalized schemes) or the exact value
    /// (unnormalized).
    pub fn decode(&self, seq: &[usize]) -> Result<f64> {
        self.decode_with(seq, BinPoint::Mid)
    }

    pub fn decode_with(&self, seq: &[usize], point: BinPoint) -> Result<f64> {
        match self {
            TokenScheme::Normalized(s) => s.decode(seq, point),
            TokenScheme::Unnormalized(s) => s.decode(seq),
            TokenScheme::Hamming(s) => s.decode(seq, point),
            TokenScheme::Repetition(s) => s.inner.decode_with(&s.resolve(seq)?, point),
        }
    }

    pub fn is_valid(&self, seq: &[usize]) -> bool {
        self.decode(seq).is_ok()
    }

    /// Width of the interval of real values that `seq` stands for.
    pub fn bin_width(&self, seq: &[usize]) -> Result<f64> {
        match self {
            TokenScheme::Normalized(s) => s.check(seq).map(|_| s.bin_width()),
            TokenScheme::Unnormalized(s) => s.bin_width(seq),
            TokenScheme::Hamming(s) => s.decode(seq, BinPoint::Left).map(|_| s.bin_width()),
            TokenScheme::Repetition(s) => s.inner.bin_width(&s.resolve(seq)?),
        }
    }

    /// Tokens that extend `prefix` towards at least one valid full sequence.
    pub fn valid_next_tokens(&self, prefix: &[usize]) -> Result<Vec<usize>> {
        if prefix.len() >= self.len() {
            return Err(Error::Usage(format!(
                "prefix of length {} is already complete (sequence length {})",
                prefix.len(),
                self.len()
            )));
        }
        match self {
            TokenScheme::Normalized(s) => {
                if let Some(pos) = prefix.iter().position(|&t| t >= s.base as usize) {
                    return Err(Error::Codec(format!("invalid token at position {pos}")));
                }
                Ok((0..s.base as usize).collect())
            }
            TokenScheme::Hamming(_) => {
                if let Some(pos) = prefix.iter().position(|&t| t > 1) {
                    return Err(Error::Codec(format!("invalid token at position {pos}")));
                }
                Ok(vec![0, 1])
            }
            TokenScheme::Unnormalized(s) => s.valid_next_tokens(prefix),
            TokenScheme::Repetition(s) => {
                let inner_len = s.inner.len();
                let start = prefix.len() / inner_len * inner_len;
                s.inner.valid_next_tokens(&prefix[start..])
            }
        }
    }

    /// Number of sequences accepted by the constrained-decoding masks.
    pub fn valid_count(&self) -> u128 {
        match self {
            TokenScheme::Normalized(s) => s.bins(),
            TokenScheme::Unnormalized(s) => s.valid_count(),
            TokenScheme::Hamming(s) => 1u128 << s.bits,
            TokenScheme::Repetition(s) => s.inner.valid_count().saturating_pow(s.repeats as u32),
        }
    }

    /// Plurality-voted inner sequence for repetition schemes; identity otherwise.
    pub fn unwrap_repeats(&self, seq: &[usize]) -> Result<TokenSeq> {
        match self {
            TokenScheme::Repetition(s) => s.resolve(seq),
            _ => Ok(TokenSeq(seq.to_vec())),
        }
    }

    pub fn inner(&self) -> &TokenScheme {
        match self {
            TokenScheme::Repetition(s) => &s.inner,
            other => other,
        }
    }

    pub fn token_label(&self, token: usize) -> String {
        match self {
            TokenScheme::Unnormalized(s) if s.signs == SignTokens::Dedicated => {
                if token == s.plus() {
                    "+".into()
                } else if token == s.minus() {
                    "-".into()
                } else {
                    token.to_string()
                }
            }
            TokenScheme::Repetition(s) => s.inner.token_label(token),
            _ => token.to_string(),
        }
    }

    /// Debug rendering such as `<+><-><2><2><2><1><2><3><4>`.
    pub fn render(&self, seq: &[usize]) -> String {
        seq.iter().map(|&t| format!("<{}>", self.token_label(t))).collect()
    }
}

impl fmt::Display for TokenScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenScheme::Normalized(s) => write!(f, "normalized(B={}, K={})", s.base, s.length),
            TokenScheme::Unnormalized(s) => write!(
                f,
                "unnormalized(B={}, E={}, M={})",
                s.base, s.exp_digits, s.mantissa_digits
            ),
            TokenScheme::Hamming(s) => write!(f, "hamming(K={})", s.bits),
            TokenScheme::Repetition(s) => write!(f, "{} x{}", s.inner, s.repeats),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn u(b: u32, e: usize, m: usize) -> TokenScheme {
        TokenScheme::unnormalized(b, e, m).unwrap()
    }

    #[test]
    fn normalized_binary_example() {
        let s = TokenScheme::normalized(2, 3).unwrap();
        let seq = s.encode(0.375).unwrap();
        assert_eq!(seq.0, vec![0, 1, 1]);
        assert_eq!(s.decode_with(&seq, BinPoint::Left).unwrap(), 0.375);
        assert_eq!(s.decode(&[0, 0, 0]).unwrap(), 0.0625);
    }

    #[test]
    fn normalized_zero_and_decimal() {
        let s = TokenScheme::normalized(10, 2).unwrap();
        assert_eq!(s.encode(0.0).unwrap().0, vec![0, 0]);
        assert_eq!(s.encode(0.7).unwrap().0, vec![7, 0]);
        assert!(matches!(s.encode(1.0), Err(Error::Range(_))));
        assert!(matches!(s.encode(-0.1), Err(Error::Range(_))));
        assert!(matches!(s.decode(&[10, 0]), Err(Error::Codec(_))));
    }

    #[test]
    fn normalized_roundtrip_on_uniform_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (b, k) in [(2, 3), (10, 4), (8, 6), (3, 7)] {
            let s = NormalizedScheme::new(b, k).unwrap();
            let half = s.bin_width() / 2.0;
            for _ in 0..100_000 {
                let y: f64 = rng.random();
                let seq = s.encode(y).unwrap();
                let left = s.decode(&seq, BinPoint::Left).unwrap();
                assert!(left <= y && y < left + s.bin_width(), "{y} -> {left}");
                assert!((s.decode(&seq, BinPoint::Mid).unwrap() - y).abs() <= half);
            }
        }
    }

    #[test]
    fn unnormalized_paper_layout() {
        let s = u(10, 3, 4);
        let seq = s.encode(1.23456789e-222).unwrap();
        assert_eq!(s.render(&seq), "<+><-><2><2><2><1><2><3><4>");
        let back = s.decode(&seq).unwrap();
        assert!((back - 1.234e-222).abs() <= 1e-12 * 1.234e-222);
    }

    #[test]
    fn unnormalized_zero_and_negative() {
        let s = u(10, 3, 4);
        let zero = s.encode(0.0).unwrap();
        assert_eq!(s.render(&zero), "<+><-><9><9><9><0><0><0><0>");
        assert_eq!(s.decode(&zero).unwrap(), 0.0);

        let s = u(10, 1, 2);
        assert_eq!(s.render(&s.encode(-2.5).unwrap()), "<-><+><0><2><5>");
        assert_eq!(s.decode(&s.encode(-2.5).unwrap()).unwrap(), -2.5);
    }

    #[test]
    fn unnormalized_exact_at_powers_of_base() {
        let s = u(10, 2, 3);
        for e in -99..=99 {
            let y: f64 = format!("1e{e}").parse().unwrap();
            assert_eq!(s.decode(&s.encode(y).unwrap()).unwrap(), y, "10^{e}");
        }
        let s = u(2, 4, 5);
        for e in -15..=15 {
            let y = 2f64.powi(e);
            assert_eq!(s.decode(&s.encode(y).unwrap()).unwrap(), y);
        }
    }

    #[test]
    fn unnormalized_saturates_out_of_range() {
        let s = u(10, 1, 2);
        // Representable magnitudes: [1e-9, 1e10).
        assert_eq!(s.decode(&s.encode(1e30).unwrap()).unwrap(), 9.9e9);
        assert_eq!(s.decode(&s.encode(-1e30).unwrap()).unwrap(), -9.9e9);
        assert_eq!(s.decode(&s.encode(0.8e-9).unwrap()).unwrap(), 1e-9);
        assert_eq!(s.decode(&s.encode(1e-12).unwrap()).unwrap(), 0.0);
        assert!(matches!(s.encode(f64::NAN), Err(Error::Range(_))));
        assert!(matches!(s.encode(f64::INFINITY), Err(Error::Range(_))));
    }

    #[test]
    fn unnormalized_rejects_bad_tokens_with_position() {
        let s = u(10, 1, 2);
        // digit where a sign belongs
        let err = s.decode(&[3, 10, 0, 2, 5]).unwrap_err();
        assert!(err.to_string().contains("position 0"), "{err}");
        // leading zero mantissa outside canonical zero
        let err = s.decode(&[10, 10, 0, 0, 5]).unwrap_err();
        assert!(err.to_string().contains("position 3"), "{err}");
    }

    #[test]
    fn unnormalized_relative_roundtrip_on_log_uniform_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (b, e, m) in [(10, 2, 4), (2, 3, 8), (4, 2, 5), (8, 2, 3)] {
            let s = UnnormalizedScheme::new(b, e, m).unwrap();
            let emax = s.max_exponent() as f64;
            let bound = (b as f64).powi(-(m as i32 - 1));
            let lo = -emax * (b as f64).ln();
            let hi = (emax + 1.0) * (b as f64).ln();
            for _ in 0..100_000 {
                let mut y = rng.random_range(lo..hi).exp();
                if y >= f64::MAX || y < f64::MIN_POSITIVE {
                    continue;
                }
                if rng.random::<bool>() {
                    y = -y;
                }
                let back = s.decode(&s.encode(y).unwrap()).unwrap();
                assert!(((back - y) / y).abs() <= bound, "{y} -> {back}");
            }
        }
    }

    #[test]
    fn valid_next_tokens_positions() {
        let s = u(10, 1, 2);
        assert_eq!(s.valid_next_tokens(&[]).unwrap(), vec![10, 11]);
        // canonical zero still reachable: + - 9
        assert_eq!(s.valid_next_tokens(&[10, 11, 9]).unwrap(), (0..10).collect::<Vec<_>>());
        // not reachable: + + 9
        assert_eq!(s.valid_next_tokens(&[10, 10, 9]).unwrap(), (1..10).collect::<Vec<_>>());
        assert_eq!(s.valid_next_tokens(&[10, 11, 9, 0]).unwrap(), vec![0]);
        assert!(matches!(s.valid_next_tokens(&[10, 11, 9, 0, 0]), Err(Error::Usage(_))));
        let n = TokenScheme::normalized(4, 3).unwrap();
        assert_eq!(n.valid_next_tokens(&[3, 1]).unwrap(), vec![0, 1, 2, 3]);
    }

    fn walk(s: &TokenScheme, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == s.len() {
            out.push(prefix.clone());
            return;
        }
        for t in s.valid_next_tokens(prefix).unwrap() {
            prefix.push(t);
            walk(s, prefix, out);
            prefix.pop();
        }
    }

    fn all_sequences(vocab: usize, len: usize) -> Vec<Vec<usize>> {
        (0..vocab.pow(len as u32))
            .map(|mut i| {
                let mut v = vec![0; len];
                for slot in v.iter_mut().rev() {
                    *slot = i % vocab;
                    i /= vocab;
                }
                v
            })
            .collect()
    }

    #[test]
    fn mask_walk_is_sound_and_complete() {
        let mut schemes = vec![];
        for b in 2..=4 {
            for m in 1..=2 {
                schemes.push(u(b, 1, m));
                schemes.push(TokenScheme::Unnormalized(
                    UnnormalizedScheme::new(b, 1, m).unwrap().with_signs(SignTokens::ReuseDigits),
                ));
            }
            for k in 1..=6 {
                if (b as usize).pow(k as u32) <= 4096 {
                    schemes.push(TokenScheme::normalized(b, k).unwrap());
                }
            }
        }
        for k in 1..=6 {
            schemes.push(TokenScheme::hamming(k).unwrap());
        }
        for s in &schemes {
            let mut walked = vec![];
            walk(s, &mut vec![], &mut walked);
            assert_eq!(walked.len() as u128, s.valid_count(), "{s}");
            // Exactly the decodable sequences are walkable.
            let decodable: Vec<Vec<usize>> = all_sequences(s.vocab_size(), s.len())
                .into_iter()
                .filter(|q| s.is_valid(q))
                .collect();
            assert_eq!(walked, decodable, "{s}");
        }
    }

    #[test]
    fn leading_mantissa_mask_matches_enumeration() {
        // Enumerate every completable sequence and compare the set of m_1
        // tokens seen for each (sign, exponent) prefix.
        for b in 2..=4u32 {
            let s = u(b, 1, 2);
            let m_start = 3;
            let valid: Vec<Vec<usize>> = all_sequences(s.vocab_size(), s.len())
                .into_iter()
                .filter(|q| s.is_valid(q))
                .collect();
            for q in &valid {
                let prefix = &q[..m_start];
                let mut expected: Vec<usize> = valid
                    .iter()
                    .filter(|r| &r[..m_start] == prefix)
                    .map(|r| r[m_start])
                    .collect();
                expected.sort();
                expected.dedup();
                assert_eq!(s.valid_next_tokens(prefix).unwrap(), expected);
            }
        }
    }

    #[test]
    fn hamming_listing() {
        let words: Vec<Vec<u8>> = (0..8).map(|r| hamming_rank_to_word(r, 3).unwrap()).collect();
        assert_eq!(
            words,
            vec![
                vec![0, 0, 0],
                vec![0, 0, 1],
                vec![0, 1, 0],
                vec![1, 0, 0],
                vec![0, 1, 1],
                vec![1, 0, 1],
                vec![1, 1, 0],
                vec![1, 1, 1]
            ]
        );
        assert_eq!(hamming_rank_to_word(0, 8).unwrap(), vec![0; 8]);
        assert_eq!(hamming_rank_to_word(255, 8).unwrap(), vec![1; 8]);
        assert!(matches!(hamming_rank_to_word(8, 3), Err(Error::Range(_))));
    }

    #[test]
    fn hamming_bijection_exhaustive() {
        for k in 1..=12 {
            let mut prev: Option<(usize, u64)> = None;
            for r in 0..(1u64 << k) {
                let w = hamming_rank_to_word(r, k).unwrap();
                assert_eq!(hamming_word_to_rank(&w).unwrap(), r);
                let pop = w.iter().filter(|&&b| b == 1).count();
                let val = w.iter().fold(0u64, |a, &b| a * 2 + b as u64);
                if let Some(p) = prev {
                    assert!(p < (pop, val), "order broken at rank {r}");
                }
                prev = Some((pop, val));
            }
        }
    }

    #[test]
    fn majority_vote_examples() {
        let inner = TokenScheme::normalized(5, 2).unwrap();
        let rep = RepetitionScheme::new(inner.clone(), 3).unwrap();
        assert_eq!(rep.majority_vote(&[1, 2, 1, 3, 4, 2]).unwrap().0, vec![1, 2]);
        // three-way tie goes to the earliest repeat
        assert_eq!(rep.majority_vote(&[1, 2, 3, 4, 0, 0]).unwrap().0, vec![1, 2]);
        assert!(matches!(rep.majority_vote(&[1, 2, 3]), Err(Error::Codec(_))));
        let one = RepetitionScheme::new(inner, 1).unwrap();
        assert_eq!(one.majority_vote(&[4, 3]).unwrap().0, vec![4, 3]);
    }

    #[test]
    fn single_corruption_never_changes_vote() {
        let inners = [u(3, 1, 2), TokenScheme::normalized(3, 3).unwrap(), TokenScheme::hamming(4).unwrap()];
        for inner in inners {
            let rep = RepetitionScheme::new(inner.clone(), 3).unwrap();
            let wrapped = TokenScheme::Repetition(rep.clone());
            let mut clean = vec![];
            walk(&inner, &mut vec![], &mut clean);
            for seq in clean {
                let full: Vec<usize> = seq.repeat(3);
                for pos in 0..full.len() {
                    for tok in 0..inner.vocab_size() {
                        let mut bad = full.clone();
                        bad[pos] = tok;
                        assert_eq!(rep.majority_vote(&bad).unwrap().0, seq);
                        assert_eq!(
                            wrapped.decode(&bad).unwrap(),
                            inner.decode(&seq).unwrap()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn repetition_mask_follows_inner_positions() {
        let s = u(10, 1, 2).repeated(2).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(s.valid_next_tokens(&[10, 11, 9, 0, 0]).unwrap(), vec![10, 11]);
        assert_eq!(s.valid_next_tokens(&[10, 11, 9, 0, 0, 10, 11, 9, 0]).unwrap(), vec![0]);
    }

    #[test]
    fn serde_roundtrip_of_nested_scheme() {
        let s = u(10, 2, 3).repeated(3).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<TokenScheme>(&json).unwrap(), s);
    }

    proptest! {
        #[test]
        fn normalized_encode_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let s = TokenScheme::normalized(3, 5).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(s.encode(lo).unwrap() <= s.encode(hi).unwrap());
        }

        #[test]
        fn unnormalized_encode_respects_digit_layout(y in -1e12f64..1e12) {
            let s = UnnormalizedScheme::new(10, 2, 4).unwrap();
            let seq = s.encode(y).unwrap();
            prop_assert_eq!(seq.len(), s.len());
            if y != 0.0 {
                prop_assert!(seq[4] != 0);
                prop_assert_eq!(seq[0] == s.minus(), y < 0.0);
            }
        }
    }
}
