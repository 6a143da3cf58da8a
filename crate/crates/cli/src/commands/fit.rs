use std::path::PathBuf;

use crate::commands::{config_dir, fit_experiment, with_seed, write_fit};
use crate::config::ExperimentConfig;
use crate::output::OutDir;
use crate::{Cli, CliResult};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Experiment config (TOML).
    pub config: PathBuf,
}

pub fn run(cli: &Cli, args: &Args) -> CliResult<()> {
    let cfg = with_seed(ExperimentConfig::load(&args.config)?, cli.seed);
    let out = OutDir::create(&cli.out)?;
    let outcome = match fit_experiment(&cfg, config_dir(&args.config), "fit") {
        Ok(o) => o,
        Err(f) => {
            if f.error.code() == 1 {
                out.write_jsonl("history.jsonl", &f.history.epochs)?;
                eprintln!("history up to the failure written to {}", out.path("history.jsonl").display());
            }
            return Err(f.error);
        }
    };
    write_fit(&out, &outcome)?;
    let r = &outcome.result;
    let best = r.history.best_epoch.map_or_else(|| "none".to_string(), |e| e.to_string());
    println!(
        "{} head, {} parameters, {} epochs (best {best})",
        cfg.model.head.name(),
        r.param_count,
        r.history.epochs.len(),
    );
    for m in &r.metrics {
        match m.percent {
            Some(p) => println!("{}: {:.6} ({p:.2}%)", m.name, m.value),
            None => println!("{}: {:.6}", m.name, m.value),
        }
    }
    println!("results in {}", out.path("result.json").display());
    Ok(())
}
