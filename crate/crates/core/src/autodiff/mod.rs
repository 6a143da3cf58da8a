//! Reverse-mode automatic differentiation over dense `f64` arrays.

mod check;
mod expr;
pub mod nn;
mod params;
mod tensor;

pub use check::{grad_check, RELATIVE_ERROR_FLOOR};
pub use expr::{Bindings, Expr, Var};
pub use params::{AdamConfig, Param, ParamStore};
pub use tensor::Tensor;

