use decoreg_core::tokenizer::TokenScheme;

use crate::{CliError, CliResult};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Number to encode.
    #[arg(allow_hyphen_values = true)]
    pub value: String,
    /// Fixed-length digits of a value in [0, 1) instead of sign/exponent/mantissa.
    #[arg(long)]
    pub normalized: bool,
    /// Gray-code style bits of a value in [0, 1).
    #[arg(long, conflicts_with = "normalized")]
    pub hamming: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub base: u32,
    /// Digits of a normalized encoding.
    #[arg(long, default_value_t = 4)]
    pub length: usize,
    #[arg(long, default_value_t = 3)]
    pub exp_digits: usize,
    #[arg(long = "mantissa", default_value_t = 4)]
    pub mantissa: usize,
    /// Repeat the encoding this many times.
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
}

impl Args {
    pub fn scheme(&self) -> CliResult<TokenScheme> {
        let inner = if let Some(bits) = self.hamming {
            TokenScheme::hamming(bits)?
        } else if self.normalized {
            TokenScheme::normalized(self.base, self.length)?
        } else {
            TokenScheme::unnormalized(self.base, self.exp_digits, self.mantissa)?
        };
        Ok(if self.repeat > 1 { inner.repeated(self.repeat)? } else { inner })
    }
}

pub fn run(args: &Args) -> CliResult<()> {
    let v: f64 = args
        .value
        .trim()
        .parse()
        .map_err(|_| CliError::usage(format!("cannot parse `{}` as a real number", args.value)))?;
    let scheme = args.scheme()?;
    let seq = scheme.encode(v).map_err(|e| CliError::usage(e.to_string()))?;
    let back = scheme.decode(&seq)?;
    println!("scheme: {scheme}");
    println!("tokens: {}", scheme.render(&seq));
    println!("decoded: {}", fmt_real(back));
    Ok(())
}

/// Plain notation for ordinary magnitudes, scientific otherwise.
pub fn fmt_real(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}
