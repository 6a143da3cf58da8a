//! Decoding-based regression: numbers emitted as constrained token sequences
//! by a small autoregressive head, with pointwise, histogram and mixture
//! baselines and an exact histogram risk verifier.

pub mod autodiff;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod heads;
pub mod tasks;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
