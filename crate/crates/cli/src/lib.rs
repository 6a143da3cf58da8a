//! The `decoreg` experiment driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod output;
pub mod plot;

#[derive(Debug, Parser)]
#[command(name = "decoreg", version, about = "Decoding-based regression experiments")]
pub struct Cli {
    /// Overrides the seed in configs and flags.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory that receives every artifact.
    #[arg(long, global = true, env = "DECOREG_OUT", default_value = "decoreg-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the token rendering of a number and its round trip.
    Tokenize(commands::tokenize::Args),
    /// Train one configured model and evaluate it.
    Fit(commands::fit::Args),
    /// Empirical vs theoretical histogram risk over a (k, N) grid.
    Risk(commands::risk::Args),
    /// Test-set NLL over repeated splits plus sampled scatter data.
    Density(commands::density::Args),
    /// Cartesian sweep over config axes.
    Sweep(commands::sweep::Args),
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<decoreg_core::Error> for CliError {
    fn from(e: decoreg_core::Error) -> Self {
        use decoreg_core::Error as E;
        match e {
            E::Config(_) | E::Usage(_) | E::Lookup { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("io: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Parses `args` (program name first) and runs the command. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Tokenize(a) => commands::tokenize::run(a),
        Command::Fit(a) => commands::fit::run(cli, a),
        Command::Risk(a) => commands::risk::run(cli, a),
        Command::Density(a) => commands::density::run(cli, a),
        Command::Sweep(a) => commands::sweep::run(cli, a),
    }
}
