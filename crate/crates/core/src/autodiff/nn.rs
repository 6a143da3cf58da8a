//! Layer-building helpers composed from the primitive ops.

use rand::Rng;

use super::expr::{Expr, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Additive mask value for disallowed attention positions.
pub const MASKED: f64 = -1e9;

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) {
    store.insert(format!("{name}.w"), glorot_uniform(rng, fan_in, fan_out));
    store.insert(format!("{name}.b"), Tensor::zeros([fan_out]));
}

/// `x · W + b` with leaves `{name}.w` and `{name}.b`.
pub fn linear(e: &mut Expr, x: Var, name: &str, fan_in: usize, fan_out: usize) -> Result<Var> {
    let w = e.leaf(&format!("{name}.w"), &[fan_in, fan_out])?;
    let b = e.leaf(&format!("{name}.b"), &[fan_out])?;
    let xw = e.matmul(x, w)?;
    e.add(xw, b)
}

pub fn init_attention<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, width: usize) {
    for proj in ["q", "k", "v", "o"] {
        store.insert(format!("{name}.w{proj}"), glorot_uniform(rng, width, width));
    }
}

/// `[T, T]` additive mask: 0 on and below the diagonal, [`MASKED`] above.
pub fn causal_mask(len: usize) -> Tensor {
    let data = (0..len * len)
        .map(|i| if i % len > i / len { MASKED } else { 0.0 })
        .collect();
    Tensor::from_parts(vec![len, len], data)
}

/// Multi-head causal scaled dot-product self-attention over `x: [B, T, D]`.
pub fn causal_self_attention(e: &mut Expr, x: Var, name: &str, heads: usize) -> Result<Var> {
    let shape = e.shape(x).to_vec();
    let [batch, len, width] = shape[..] else {
        return Err(Error::Config(format!("attention input must be rank 3, got {shape:?}")));
    };
    if heads == 0 || width % heads != 0 {
        return Err(Error::Config(format!("width {width} not divisible into {heads} heads")));
    }
    let head_dim = width / heads;
    let project = |e: &mut Expr, which: &str| -> Result<Var> {
        let w = e.leaf(&format!("{name}.w{which}"), &[width, width])?;
        let p = e.matmul(x, w)?;
        let p = e.reshape(p, &[batch, len, heads, head_dim])?;
        let p = e.permute(p, &[0, 2, 1, 3])?;
        e.reshape(p, &[batch * heads, len, head_dim])
    };
    let q = project(e, "q")?;
    let k = project(e, "k")?;
    let v = project(e, "v")?;
    let kt = e.permute(k, &[0, 2, 1])?;
    let scores = e.batch_matmul(q, kt)?;
    let scores = e.scale(scores, 1.0 / (head_dim as f64).sqrt());
    let mask = e.constant(causal_mask(len));
    let scores = e.add(scores, mask)?;
    let attn = e.softmax(scores);
    let ctx = e.batch_matmul(attn, v)?;
    let ctx = e.reshape(ctx, &[batch, heads, len, head_dim])?;
    let ctx = e.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = e.reshape(ctx, &[batch, len, width])?;
    let wo = e.leaf(&format!("{name}.wo"), &[width, width])?;
    e.matmul(ctx, wo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_respects_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = glorot_uniform(&mut rng, 10, 14);
        let limit = (6.0f64 / 24.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= limit));
        assert_eq!(t.shape(), &[10, 14]);
    }

    #[test]
    fn causal_mask_blocks_future() {
        let m = causal_mask(3);
        assert_eq!(m.data(), &[0.0, MASKED, MASKED, 0.0, 0.0, MASKED, 0.0, 0.0, 0.0]);
    }
}
