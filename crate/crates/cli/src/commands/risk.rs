use std::time::Instant;

use clap::ValueEnum;
use decoreg_core::eval::{risk_experiment, Density1D, RiskCell, RiskConfig, RiskEstimator, TruncatedGaussian, Uniform};
use decoreg_core::training::TrainConfig;
use serde::Serialize;

use crate::config::SCHEMA_VERSION;
use crate::output::OutDir;
use crate::plot::{Plot, Series};
use crate::{Cli, CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityKind {
    TruncatedGaussian,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EstimatorKind {
    Histogram,
    Decoder,
    Riemann,
}

impl From<EstimatorKind> for RiskEstimator {
    fn from(e: EstimatorKind) -> Self {
        match e {
            EstimatorKind::Histogram => RiskEstimator::Histogram,
            EstimatorKind::Decoder => RiskEstimator::Decoder,
            EstimatorKind::Riemann => RiskEstimator::Riemann,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long, value_enum, default_value_t = DensityKind::TruncatedGaussian)]
    pub density: DensityKind,
    #[arg(long, default_value_t = 0.5)]
    pub mu: f64,
    #[arg(long, default_value_t = 0.25)]
    pub sigma: f64,
    /// Bit depths: `a..b` (inclusive) or a comma list.
    #[arg(long = "k", default_value = "1..10")]
    pub k: String,
    /// Sample sizes: a comma list or an inclusive range.
    #[arg(long = "N", default_value = "1024,16384")]
    pub n: String,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    #[arg(long, value_enum, default_value_t = EstimatorKind::Histogram)]
    pub estimator: EstimatorKind,
    /// Training epochs for the decoder and Riemann estimators.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

/// `"1..14"`, `"1..=14"` or `"1,2,8"`. Ranges include both ends.
pub fn parse_list(s: &str) -> CliResult<Vec<u64>> {
    let bad = || CliError::usage(format!("cannot parse `{s}`; use a..b or a comma list"));
    let s = s.trim();
    let out: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().trim_start_matches('=').trim().parse().map_err(|_| bad())?;
        if b < a {
            return Err(CliError::usage(format!("empty range `{s}`")));
        }
        (a..=b).collect()
    } else {
        s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<CliResult<_>>()?
    };
    if out.is_empty() {
        return Err(CliError::usage(format!("`{s}` is empty")));
    }
    Ok(out)
}

#[derive(Serialize)]
struct RiskSummary<'a> {
    schema: u32,
    command: &'static str,
    seed: u64,
    density: DensityKind,
    mu: Option<f64>,
    sigma: Option<f64>,
    config: &'a RiskConfig,
    density_name: &'a str,
    roughness: f64,
    argmin_k: Vec<(usize, u32)>,
    cells: Vec<CellRow<'a>>,
}

#[derive(Serialize)]
struct CellRow<'a> {
    #[serde(flatten)]
    cell: &'a RiskCell,
    theoretical: f64,
}

pub fn run(cli: &Cli, args: &Args) -> CliResult<()> {
    let start = Instant::now();
    let ks = parse_list(&args.k)?
        .into_iter()
        .map(|k| u32::try_from(k).map_err(|_| CliError::usage(format!("k = {k} is too large"))))
        .collect::<CliResult<Vec<_>>>()?;
    let ns: Vec<usize> = parse_list(&args.n)?.into_iter().map(|n| n as usize).collect();
    let seed = cli.seed.unwrap_or(0);
    let mut train = TrainConfig::default();
    if let Some(e) = args.epochs {
        train.max_epochs = e;
    }
    if let Some(lr) = args.lr {
        train.learning_rate = lr;
    }
    let cfg = RiskConfig { ks, ns, runs: args.runs, seed, estimator: args.estimator.into(), train, ..Default::default() };
    let density: Box<dyn Density1D> = match args.density {
        DensityKind::TruncatedGaussian => Box::new(TruncatedGaussian::new(args.mu, args.sigma)?),
        DensityKind::Uniform => Box::new(Uniform),
    };
    let report = risk_experiment(density.as_ref(), &cfg)?;
    let out = OutDir::create(&cli.out)?;
    let argmin: Vec<(usize, u32)> =
        cfg.ns.iter().map(|&n| (n, report.argmin_k(n).expect("nonempty k grid"))).collect();
    let gaussian = args.density == DensityKind::TruncatedGaussian;
    let summary = RiskSummary {
        schema: SCHEMA_VERSION,
        command: "risk",
        seed,
        density: args.density,
        mu: gaussian.then_some(args.mu),
        sigma: gaussian.then_some(args.sigma),
        config: &cfg,
        density_name: &report.density,
        roughness: report.roughness,
        argmin_k: argmin.clone(),
        cells: report.cells.iter().map(|c| CellRow { cell: c, theoretical: c.theoretical() }).collect(),
    };
    out.write_json("risk.json", &summary)?;
    out.write_jsonl("records.jsonl", &report.records)?;
    let rows: Vec<Vec<f64>> = report
        .cells
        .iter()
        .map(|c| vec![c.k as f64, c.n as f64, c.mean, c.std, c.bias, c.variance, c.theoretical()])
        .collect();
    out.write_csv("risk.csv", &["k", "n", "empirical_mean", "empirical_std", "bias", "variance", "theoretical"], &rows)?;
    let mut plot = Plot::new(&format!("{} risk, {}", report.estimator, report.density), "k", "MISE").log_y();
    for &n in &cfg.ns {
        let cells: Vec<&RiskCell> = report.cells.iter().filter(|c| c.n == n).collect();
        plot = plot
            .with(Series::line(format!("empirical N={n}"), cells.iter().map(|c| (c.k as f64, c.mean)).collect()))
            .with(Series::line(format!("theoretical N={n}"), cells.iter().map(|c| (c.k as f64, c.theoretical())).collect()));
    }
    out.write_text("risk.svg", &plot.to_svg())?;

    println!("{:>3} {:>7} {:>13} {:>13} {:>13} {:>13}", "k", "N", "empirical", "std", "bias", "theoretical");
    for c in &report.cells {
        println!(
            "{:>3} {:>7} {:>13.6e} {:>13.6e} {:>13.6e} {:>13.6e}",
            c.k, c.n, c.mean, c.std, c.bias, c.theoretical()
        );
    }
    for (n, k) in argmin {
        println!("argmin k at N={n}: {k}");
    }
    println!("wrote {} in {:.1}s", out.path("risk.json").display(), start.elapsed().as_secs_f64());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_and_ranges() {
        assert_eq!(parse_list("1..4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_list("1..=3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_list("1024, 16384").unwrap(), vec![1024, 16384]);
        assert_eq!(parse_list("5..2").unwrap_err().code(), 2);
        assert_eq!(parse_list("x").unwrap_err().code(), 2);
    }
}
