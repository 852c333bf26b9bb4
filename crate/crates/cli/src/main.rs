use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cvkf_cli::config::parse_unresolved;
use cvkf_cli::{run_experiment, scenario_listing, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "cvkf", version, about = "Continuous-time variational Kalman filter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its artifacts.
    Run {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a config and print it with every default filled in.
    Validate { config: PathBuf },
    /// List built-in scenarios and their parameters.
    Scenarios,
}

fn load(path: &PathBuf, seed: Option<u64>, output_dir: Option<PathBuf>) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })?;
    let mut cfg = parse_unresolved(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if output_dir.is_some() {
        cfg.output_dir = output_dir;
    }
    cfg.resolve()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            output_dir,
            seed,
        } => load(&config, seed, output_dir).and_then(|cfg| {
            let report = run_experiment(&cfg)?;
            for f in &report.files {
                println!("{}", f.display());
            }
            Ok(())
        }),
        Command::Validate { config } => load(&config, None, None).map(|cfg| print!("{}", cfg.to_toml())),
        Command::Scenarios => {
            print!("{}", scenario_listing());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::FAILURE
        }
    }
}
