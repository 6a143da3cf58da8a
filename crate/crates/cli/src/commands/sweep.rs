use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commands::{config_dir, fit_experiment, with_seed, write_fit};
use crate::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::output::OutDir;
use crate::{Cli, CliError, CliResult};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Experiment config with a `[sweep]` section.
    pub config: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub run: usize,
    pub dir: String,
    pub overrides: BTreeMap<String, toml::Value>,
    pub status: String,
    pub primary: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub schema: u32,
    pub command: String,
    pub seed: u64,
    pub primary_metric: String,
    pub higher_is_better: bool,
    pub runs: Vec<SweepRun>,
    /// Run indices, best first. Failed runs are left out.
    pub ranking: Vec<usize>,
}

/// Sets `path` (dot separated) inside `root`, creating tables on the way.
pub fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> CliResult<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| CliError::usage(format!("sweep axis `{path}`: `{}` is not a table", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            table.insert(key.to_string(), value);
            return Ok(());
        }
        cur = table.entry(key.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(CliError::usage("empty sweep axis"))
}

/// Every combination of axis values, the last axis varying fastest.
pub fn expand(axes: &BTreeMap<String, Vec<toml::Value>>) -> Vec<BTreeMap<String, toml::Value>> {
    let mut combos = vec![BTreeMap::new()];
    for (path, values) in axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.insert(path.clone(), v.clone());
                    c
                })
            })
            .collect();
    }
    combos
}

pub fn run(cli: &Cli, args: &Args) -> CliResult<()> {
    let base_cfg = with_seed(ExperimentConfig::load(&args.config)?, cli.seed);
    let sweep = base_cfg.sweep.clone().ok_or_else(|| CliError::usage("config has no [sweep] section"))?;
    if !sweep.axes.values().any(|v| v.len() > 1) {
        return Err(CliError::usage("sweep needs at least one axis with more than one value"));
    }
    if let Some((path, _)) = sweep.axes.iter().find(|(_, v)| v.is_empty()) {
        return Err(CliError::usage(format!("sweep axis `{path}` has no values")));
    }
    let count: usize = sweep.axes.values().map(Vec::len).product();
    if count > sweep.cap {
        return Err(CliError::usage(format!("sweep expands to {count} runs, over the cap of {}", sweep.cap)));
    }
    let mut base = base_cfg.clone();
    base.sweep = None;
    let base_value = toml::Value::try_from(&base).map_err(|e| CliError::runtime(e.to_string()))?;
    let combos = expand(&sweep.axes);
    let configs = combos
        .iter()
        .map(|combo| {
            let mut v = base_value.clone();
            for (path, value) in combo {
                set_path(&mut v, path, value.clone())?;
            }
            let cfg: ExperimentConfig =
                v.try_into().map_err(|e| CliError::usage(format!("sweep point {combo:?}: {e}")))?;
            cfg.validate().map_err(|e| CliError::usage(format!("sweep point {combo:?}: {e}")))?;
            Ok(cfg)
        })
        .collect::<CliResult<Vec<_>>>()?;

    let dir = config_dir(&args.config);
    let outcomes: Vec<_> = configs.par_iter().map(|cfg| fit_experiment(cfg, dir, "sweep")).collect();

    let out = OutDir::create(&cli.out)?;
    let runs_dir = out.sub("runs")?;
    let primary = base.metrics[0];
    let mut runs = Vec::with_capacity(count);
    for (i, (outcome, combo)) in outcomes.into_iter().zip(combos).enumerate() {
        let name = format!("{i:03}");
        let run_out = runs_dir.sub(&name)?;
        let (status, value) = match outcome {
            Ok(o) => {
                write_fit(&run_out, &o)?;
                ("ok".to_string(), o.result.metric(primary.name()))
            }
            Err(f) => {
                run_out.write_jsonl("history.jsonl", &f.history.epochs)?;
                run_out.write_text("error.txt", &format!("{}\n", f.error))?;
                (format!("failed: {}", f.error), None)
            }
        };
        runs.push(SweepRun { run: i, dir: format!("runs/{name}"), overrides: combo, status, primary: value });
    }
    let mut ranking: Vec<usize> = runs.iter().filter(|r| r.primary.is_some_and(f64::is_finite)).map(|r| r.run).collect();
    ranking.sort_by(|&a, &b| {
        let (x, y) = (runs[a].primary.unwrap(), runs[b].primary.unwrap());
        let ord = if primary.higher_is_better() { y.total_cmp(&x) } else { x.total_cmp(&y) };
        ord.then(a.cmp(&b))
    });
    let summary = SweepSummary {
        schema: SCHEMA_VERSION,
        command: "sweep".into(),
        seed: base.seed,
        primary_metric: primary.name().into(),
        higher_is_better: primary.higher_is_better(),
        runs,
        ranking,
    };
    out.write_json("sweep.json", &summary)?;

    println!("{:>4} {:>14}  overrides", "rank", primary.name());
    for (rank, &i) in summary.ranking.iter().enumerate() {
        let r = &summary.runs[i];
        let o: Vec<String> = r.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("{:>4} {:>14.6}  {} ({})", rank + 1, r.primary.unwrap(), o.join(" "), r.dir);
    }
    let failed = summary.runs.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        eprintln!("{failed} of {count} runs failed; see runs/*/error.txt");
    }
    if summary.ranking.is_empty() {
        return Err(CliError::runtime("every sweep run failed"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expands_cartesian_product() {
        let mut axes = BTreeMap::new();
        axes.insert("a".to_string(), vec![toml::Value::Integer(1), toml::Value::Integer(2)]);
        axes.insert("b.c".to_string(), vec![toml::Value::Float(0.5), toml::Value::Float(1.5), toml::Value::Float(2.5)]);
        let combos = expand(&axes);
        assert_eq!(combos.len(), 6);
        assert_eq!(combos[1]["b.c"], toml::Value::Float(1.5));
        assert_eq!(combos[3]["a"], toml::Value::Integer(2));
    }

    #[test]
    fn sets_nested_paths() {
        let mut v: toml::Value = toml::from_str("[model.head]\nkind = \"riemann\"\nbins = 4\n").unwrap();
        set_path(&mut v, "model.head.bins", toml::Value::Integer(16)).unwrap();
        set_path(&mut v, "train.learning_rate", toml::Value::Float(0.01)).unwrap();
        assert_eq!(v["model"]["head"]["bins"].as_integer(), Some(16));
        assert_eq!(v["train"]["learning_rate"].as_float(), Some(0.01));
        assert!(set_path(&mut v, "model.head.kind.x", toml::Value::Integer(1)).is_err());
    }
}
