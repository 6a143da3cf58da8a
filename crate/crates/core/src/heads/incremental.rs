//! Position-by-position decoder evaluation with cached attention keys and
//! values. Produces the same logits as [`RegressionModel::build_decoder`]
//! without re-running the prefix at every step.

use super::{RegressionModel, LN_EPS};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

struct Linear<'a> {
    w: &'a [f64],
    b: Option<&'a [f64]>,
    fan_out: usize,
}

impl Linear<'_> {
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        match self.b {
            Some(b) => out.copy_from_slice(b),
            None => out.fill(0.0),
        }
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.w[i * self.fan_out..(i + 1) * self.fan_out];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }
}

struct Norm<'a> {
    g: &'a [f64],
    b: &'a [f64],
}

impl Norm<'_> {
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let w = x.len() as f64;
        let mean = x.iter().sum::<f64>() / w;
        let var = x.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / w;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (((o, &s), g), b) in out.iter_mut().zip(x).zip(self.g).zip(self.b) {
            *o = (s - mean) * inv * g + b;
        }
    }
}

struct Block<'a> {
    ln1: Norm<'a>,
    q: Linear<'a>,
    k: Linear<'a>,
    v: Linear<'a>,
    o: Linear<'a>,
    ln2: Norm<'a>,
    mlp0: Linear<'a>,
    mlp1: Linear<'a>,
}

/// Decoder state for a fixed batch of `φ` rows.
pub struct DecoderCache<'a> {
    blocks: Vec<Block<'a>>,
    tok: &'a [f64],
    pos: &'a [f64],
    ln: Norm<'a>,
    out: Linear<'a>,
    heads: usize,
    width: usize,
    vocab: usize,
    max_len: usize,
    rows: usize,
    len: usize,
    /// Per layer, `[rows, max_len, width]`.
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    /// `[rows, width]` input for the next position.
    pending: Vec<f64>,
    ready: bool,
}

impl RegressionModel {
    /// Starts incremental decoding for `φ: [B, d]`.
    pub fn decoder_cache(&self, phi: &Tensor) -> Result<DecoderCache<'_>> {
        let (cfg, scheme) = self.decoder_parts()?;
        let d = self.config.encoder.output_dim();
        if phi.shape().len() != 2 || phi.shape()[1] != d {
            return Err(Error::Usage(format!("features have shape {:?}, decoder expects [_, {d}]", phi.shape())));
        }
        let p = |name: &str| -> Result<&[f64]> {
            self.params.get(name).map(Tensor::data).ok_or_else(|| Error::Usage(format!("missing parameter {name}")))
        };
        let lin = |name: &str, fan_out: usize, bias: bool| -> Result<Linear<'_>> {
            Ok(Linear { w: p(&format!("{name}.w"))?, b: if bias { Some(p(&format!("{name}.b"))?) } else { None }, fan_out })
        };
        let norm = |name: &str| -> Result<Norm<'_>> { Ok(Norm { g: p(&format!("{name}.g"))?, b: p(&format!("{name}.b"))? }) };
        let w = cfg.width;
        let attn = |b: &str, which: &str| -> Result<Linear<'_>> {
            Ok(Linear { w: p(&format!("{b}.attn.w{which}"))?, b: None, fan_out: w })
        };
        let blocks = (0..cfg.layers)
            .map(|l| {
                let b = format!("dec.blocks.{l}");
                Ok(Block {
                    ln1: norm(&format!("{b}.ln1"))?,
                    q: attn(&b, "q")?,
                    k: attn(&b, "k")?,
                    v: attn(&b, "v")?,
                    o: attn(&b, "o")?,
                    ln2: norm(&format!("{b}.ln2"))?,
                    mlp0: lin(&format!("{b}.mlp.0"), 4 * w, true)?,
                    mlp1: lin(&format!("{b}.mlp.1"), w, true)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rows = phi.shape()[0];
        let start = lin("dec.phi", w, true)?;
        let mut pending = vec![0.0; rows * w];
        for r in 0..rows {
            start.apply(phi.row(r), &mut pending[r * w..(r + 1) * w]);
        }
        let max_len = scheme.len();
        Ok(DecoderCache {
            tok: p("dec.tok")?,
            pos: p("dec.pos")?,
            ln: norm("dec.ln")?,
            out: lin("dec.out", scheme.vocab_size(), true)?,
            heads: cfg.heads,
            width: w,
            vocab: scheme.vocab_size(),
            max_len,
            rows,
            len: 0,
            keys: vec![vec![0.0; rows * max_len * w]; cfg.layers],
            values: vec![vec![0.0; rows * max_len * w]; cfg.layers],
            pending,
            ready: true,
            blocks,
        })
    }
}

impl DecoderCache<'_> {
    /// Positions already consumed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// `[rows, V]` logits for the next token. Must alternate with [`Self::push`].
    pub fn next_logits(&mut self) -> Result<Tensor> {
        if !self.ready {
            return Err(Error::Usage("push the sampled tokens before asking for more logits".into()));
        }
        if self.len >= self.max_len {
            return Err(Error::Usage(format!("all {} positions are already decoded", self.max_len)));
        }
        let (w, t) = (self.width, self.len);
        let hd = w / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut logits = vec![0.0; self.rows * self.vocab];
        let (mut x, mut n, mut q, mut ctx, mut a) = (vec![0.0; w], vec![0.0; w], vec![0.0; w], vec![0.0; w], vec![0.0; w]);
        let mut hidden = vec![0.0; 4 * w];
        let mut scores = vec![0.0; t + 1];
        for r in 0..self.rows {
            for ((xi, p), e) in x.iter_mut().zip(&self.pending[r * w..(r + 1) * w]).zip(&self.pos[t * w..(t + 1) * w]) {
                *xi = p + e;
            }
            for (l, blk) in self.blocks.iter().enumerate() {
                blk.ln1.apply(&x, &mut n);
                blk.q.apply(&n, &mut q);
                let base = (r * self.max_len) * w;
                blk.k.apply(&n, &mut self.keys[l][base + t * w..base + (t + 1) * w]);
                blk.v.apply(&n, &mut self.values[l][base + t * w..base + (t + 1) * w]);
                let (keys, values) = (&self.keys[l], &self.values[l]);
                for h in 0..self.heads {
                    let qh = &q[h * hd..(h + 1) * hd];
                    for (s, sc) in scores.iter_mut().enumerate() {
                        let k = &keys[base + s * w + h * hd..base + s * w + (h + 1) * hd];
                        *sc = qh.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for sc in scores.iter_mut() {
                        *sc = (*sc - max).exp();
                        z += *sc;
                    }
                    let out = &mut ctx[h * hd..(h + 1) * hd];
                    out.fill(0.0);
                    for (s, &sc) in scores.iter().enumerate() {
                        let v = &values[base + s * w + h * hd..base + s * w + (h + 1) * hd];
                        for (o, &vv) in out.iter_mut().zip(v) {
                            *o += sc / z * vv;
                        }
                    }
                }
                blk.o.apply(&ctx, &mut a);
                x.iter_mut().zip(&a).for_each(|(xi, ai)| *xi += ai);
                blk.ln2.apply(&x, &mut n);
                blk.mlp0.apply(&n, &mut hidden);
                hidden.iter_mut().for_each(|h| *h = h.max(0.0));
                blk.mlp1.apply(&hidden, &mut a);
                x.iter_mut().zip(&a).for_each(|(xi, ai)| *xi += ai);
            }
            self.ln.apply(&x, &mut n);
            self.out.apply(&n, &mut logits[r * self.vocab..(r + 1) * self.vocab]);
        }
        self.len += 1;
        self.ready = false;
        Tensor::new([self.rows, self.vocab], logits)
    }

    /// Feeds one token per row as the input of the next position.
    pub fn push(&mut self, tokens: &[usize]) -> Result<()> {
        if tokens.len() != self.rows {
            return Err(Error::Usage(format!("{} tokens for {} rows", tokens.len(), self.rows)));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::Usage(format!("token {bad} outside vocabulary of {}", self.vocab)));
        }
        let w = self.width;
        for (r, &t) in tokens.iter().enumerate() {
            self.pending[r * w..(r + 1) * w].copy_from_slice(&self.tok[t * w..(t + 1) * w]);
        }
        self.ready = true;
        Ok(())
    }
}
