//! Command-line runner for the experiment families.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stokeslab::config::{parse_config_file, Experiment, OutputFormat};
use stokeslab::error::Error;
use stokeslab::runner::{list_experiments, run_experiment};

#[derive(Parser)]
#[command(
    name = "stokeslab",
    version,
    about = "Stokes slip-flow laboratory: simulation, observability estimates, bang-bang control synthesis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Free Stokes evolution with energy diagnostics.
    Simulate(RunArgs),
    /// Log-convexity and interpolation-chain measurements.
    Diagnostics(RunArgs),
    /// Fit the unique-continuation constants with a holdout batch.
    UcFit(RunArgs),
    /// Lower-bound search for the observability constant.
    ObsConstant(RunArgs),
    /// Minimal-norm bang-bang null control.
    MinNorm(RunArgs),
    /// Minimal time for a norm budget, by bisection.
    MinTime(RunArgs),
    /// Print the experiment catalog as JSON.
    List,
}

#[derive(Args)]
struct RunArgs {
    /// Path to the TOML (or JSON) run config.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output formats, comma separated: csv,json,bin.
    #[arg(long, value_delimiter = ',')]
    format: Option<Vec<String>>,
}

fn parse_formats(names: &[String]) -> Result<Vec<OutputFormat>, Error> {
    names
        .iter()
        .map(|name| match name.as_str() {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            "bin" => Ok(OutputFormat::Bin),
            other => Err(Error::ConfigValidation {
                field: "formats".into(),
                message: format!("unknown format `{other}`"),
            }),
        })
        .collect()
}

fn run(experiment: Experiment, args: &RunArgs) -> Result<bool, Error> {
    let mut config = parse_config_file(&args.config)?;
    config.experiment = experiment;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.out_dir = out.to_string_lossy().into_owned();
    }
    if let Some(formats) = &args.format {
        config.formats = parse_formats(formats)?;
    }
    config.validate()?;
    let outcome = run_experiment(&config)?;
    if let Some(checks) = outcome.summary["checks"].as_object() {
        for (name, ok) in checks {
            println!(
                "{}: {}",
                name,
                if ok.as_bool().unwrap_or(false) {
                    "PASS"
                } else {
                    "FAIL"
                }
            );
        }
    }
    println!("summary: {}", outcome.summary_path.display());
    println!("summary_hash: {}", outcome.summary_hash);
    Ok(outcome.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, args) = match &cli.command {
        Command::List => {
            println!(
                "{}",
                serde_json::to_string_pretty(&list_experiments()).unwrap()
            );
            return ExitCode::SUCCESS;
        }
        Command::Simulate(a) => (Experiment::Simulate, a),
        Command::Diagnostics(a) => (Experiment::Diagnostics, a),
        Command::UcFit(a) => (Experiment::UcFit, a),
        Command::ObsConstant(a) => (Experiment::ObsConstant, a),
        Command::MinNorm(a) => (Experiment::MinNorm, a),
        Command::MinTime(a) => (Experiment::MinTime, a),
    };
    match run(experiment, args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more acceptance checks failed");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
