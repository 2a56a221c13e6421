//! Camera-optimization toolkit CLI: analyze preconditioners for a
//! single camera, or run seeded refinement experiment grids.
//!
//! Config is JSON; any key can be overridden on the command line in
//! dot-path form, e.g. `--opt.steps=500` or `--grid.seeds=[0,1,2]`.
//! Exit codes: 0 ok, 1 config error, 2 numeric error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod svg;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Numeric(msg) => write!(f, "numeric error: {msg}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numeric(_) => 2,
        }
    }
}

/// Errors raised while validating inputs count as config errors; those
/// raised by the numerics mid-computation count as numeric errors.
impl From<camopt_core::Error> for CliError {
    fn from(e: camopt_core::Error) -> Self {
        if is_config_error(&e) {
            CliError::Config(e.to_string())
        } else {
            CliError::Numeric(e.to_string())
        }
    }
}

fn is_config_error(e: &camopt_core::Error) -> bool {
    use camopt_core::Error::*;
    match e {
        InvalidInput(_) | EmptyPointSet | InsufficientVisibility { .. } => true,
        Aborted { source, .. } => is_config_error(source),
        _ => false,
    }
}

#[derive(Parser)]
#[command(
    name = "camopt",
    about = "Preconditioned camera parameterizations: analysis and refinement experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config file; defaults apply for every missing key.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory all output files are written to.
    #[arg(long, global = true, value_name = "PATH", default_value = ".")]
    out_dir: PathBuf,
    /// Overrides scene.seed and proxy.seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for arm/camera parallelism (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Turn self-check warnings into hard numeric errors.
    #[arg(long, global = true)]
    strict: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build and export the covariance and preconditioner for one camera.
    Precondition,
    /// Tabulate raw vs preconditioned per-axis motion magnitudes.
    Trails,
    /// Run the refinement experiment grid.
    Refine,
    /// Run the fast invariant suite.
    Selfcheck,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let (plain, overrides) = match config::split_overrides(argv) {
        Ok(split) => split,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(e.exit_code());
        }
    };
    let cli = match Cli::try_parse_from(plain) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        camopt_core::configure_threads(jobs);
    }
    let config = config::load(cli.config.as_deref(), overrides, cli.seed)?;

    if matches!(cli.command, Command::Selfcheck) {
        return commands::selfcheck();
    }
    std::fs::create_dir_all(&cli.out_dir)
        .map_err(|e| CliError::Config(format!("creating {}: {e}", cli.out_dir.display())))?;
    match cli.command {
        Command::Precondition => commands::precondition(&config, &cli.out_dir, cli.strict),
        Command::Trails => commands::trails(&config, &cli.out_dir),
        Command::Refine => commands::refine(&config, &cli.out_dir),
        Command::Selfcheck => unreachable!("handled above"),
    }
}
