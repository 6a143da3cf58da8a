use std::path::PathBuf;

use decoreg_core::eval::mean_std;
use decoreg_core::training::Regressor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::commands::{config_dir, load_data, test_nll, with_seed, Data};
use crate::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::output::OutDir;
use crate::plot::{Plot, Series};
use crate::{Cli, CliError, CliResult};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Experiment config (TOML).
    pub config: PathBuf,
    /// Overrides `splits` in the config.
    #[arg(long)]
    pub splits: Option<usize>,
    /// Test rows used for the scatter sample.
    #[arg(long, default_value_t = 1000)]
    pub scatter: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitRow {
    pub split: String,
    pub nll_mean: f64,
    pub nll_std: f64,
    pub finite: usize,
    pub infinite: usize,
}

#[derive(Serialize)]
struct DensitySummary<'a> {
    schema: u32,
    command: &'static str,
    seed: u64,
    config: &'a ExperimentConfig,
    /// NLL is measured on targets in the head's scaled space.
    nll_space: &'static str,
    rows: &'a [SplitRow],
}

pub fn run(cli: &Cli, args: &Args) -> CliResult<()> {
    let mut cfg = with_seed(ExperimentConfig::load(&args.config)?, cli.seed);
    if let Some(s) = args.splits {
        cfg.splits = s;
    }
    cfg.validate()?;
    if !cfg.model.head.is_distributional() {
        return Err(CliError::usage("density needs a distributional head; a pointwise head has no density"));
    }
    let base = config_dir(&args.config);
    let fitted: Vec<CliResult<(SplitRow, Option<(Regressor, Data)>)>> = (0..cfg.splits)
        .into_par_iter()
        .map(|split| {
            let data = load_data(&cfg, base, split as u64)?;
            let mut train = cfg.train_config();
            train.seed = train.seed.wrapping_add(split as u64);
            let (reg, _) = Regressor::fit(cfg.model_config(data.train.input_dim()), &data.train, &train)?;
            let s = test_nll(&reg, &data.test)?;
            let row = SplitRow { split: split.to_string(), nll_mean: s.mean, nll_std: s.std, finite: s.finite, infinite: s.infinite };
            Ok((row, (split == 0).then_some((reg, data))))
        })
        .collect();
    let mut rows = Vec::with_capacity(cfg.splits + 1);
    let mut first = None;
    for f in fitted {
        let (row, keep) = f?;
        rows.push(row);
        if keep.is_some() {
            first = keep;
        }
    }
    let means: Vec<f64> = rows.iter().map(|r| r.nll_mean).collect();
    let (mean, std) = mean_std(&means, 1);
    rows.push(SplitRow {
        split: "aggregate".into(),
        nll_mean: mean,
        nll_std: std,
        finite: rows.iter().map(|r| r.finite).sum(),
        infinite: rows.iter().map(|r| r.infinite).sum(),
    });

    let out = OutDir::create(&cli.out)?;
    out.write_jsonl("splits.jsonl", &rows)?;
    out.write_json(
        "density.json",
        &DensitySummary { schema: SCHEMA_VERSION, command: "density", seed: cfg.seed, config: &cfg, nll_space: "scaled", rows: &rows },
    )?;

    let (reg, data) = first.expect("split 0 always runs");
    let n = args.scatter.min(data.test.len());
    let xs = &data.test.features()[..n];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ys = reg.sample(xs, &cfg.sampler_config(), &mut rng)?;
    let p = data.test.input_dim();
    let mut header: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
    header.extend(["y_sampled".to_string(), "y_observed".to_string()]);
    let table: Vec<Vec<f64>> = xs
        .iter()
        .zip(&ys)
        .zip(data.test.targets())
        .map(|((x, &s), &t)| x.iter().copied().chain([s, t]).collect())
        .collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    out.write_csv("scatter.csv", &header_refs, &table)?;
    let plot = Plot::new(&format!("{} samples", cfg.model.head.name()), "x0", "y")
        .with(Series::points("observed", table.iter().map(|r| (r[0], r[p + 1])).collect()))
        .with(Series::points("sampled", table.iter().map(|r| (r[0], r[p])).collect()));
    out.write_text("scatter.svg", &plot.to_svg())?;

    println!("{:>10} {:>12} {:>12} {:>8} {:>8}", "split", "nll_mean", "nll_std", "finite", "infinite");
    for r in &rows {
        println!("{:>10} {:>12.6} {:>12.6} {:>8} {:>8}", r.split, r.nll_mean, r.nll_std, r.finite, r.infinite);
    }
    println!("NLL over {} splits: {mean:.4} ± {std:.4}", cfg.splits);
    Ok(())
}
