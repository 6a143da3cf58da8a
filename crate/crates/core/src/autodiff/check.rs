use super::expr::{Bindings, Expr};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so that entries whose true
/// derivative is ~0 are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Largest relative discrepancy between reverse-mode gradients and central
/// differences over every entry of the `wrt` leaves.
pub fn grad_check(expr: &Expr, bindings: &Bindings<'_>, wrt: &[&str], eps: f64) -> Result<f64> {
    let analytic = expr.gradient(bindings, wrt)?;
    let mut worst = 0.0f64;
    for &name in wrt {
        let base = bindings
            .get(name)
            .ok_or_else(|| Error::Usage(format!("leaf `{name}` is not bound")))?;
        let grad = &analytic[name];
        for i in 0..base.numel() {
            let eval_at = |delta: f64| -> Result<f64> {
                let mut t: Tensor = base.clone();
                t.data_mut()[i] += delta;
                let mut b = bindings.clone();
                b.bind(name, &t);
                Ok(expr.evaluate(&b)?.item())
            };
            let numeric = (eval_at(eps)? - eval_at(-eps)?) / (2.0 * eps);
            let exact = grad.data()[i];
            let denom = exact.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
