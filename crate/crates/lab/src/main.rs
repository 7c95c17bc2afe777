use std::path::PathBuf;
use std::process::ExitCode;

use clap::{error::ErrorKind, Parser, Subcommand};
use enkf_lab::{run_to_dir, ExperimentConfig, EXIT_ERROR, EXIT_PASS, EXIT_TOLERANCE};

#[derive(Parser)]
#[command(name = "enkf-lab", version, about = "Run filtering experiments from JSON configs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its results.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Experiment seed; overrides `seed` in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (all cores by default).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Parse and validate a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::from(EXIT_PASS),
                _ => ExitCode::from(EXIT_ERROR),
            };
        }
    };
    match cli.command {
        Command::Validate { config } => match ExperimentConfig::load(&config) {
            Ok(cfg) => {
                println!("{}: valid {} config", config.display(), cfg.kind.as_str());
                ExitCode::from(EXIT_PASS)
            }
            Err(e) => {
                eprintln!("{}: {e}", config.display());
                ExitCode::from(EXIT_ERROR)
            }
        },
        Command::Run {
            config,
            out,
            seed,
            threads,
        } => {
            let mut cfg = match ExperimentConfig::load(&config) {
                Ok(cfg) => cfg,
                Err(e) => {
                    eprintln!("{}: {e}", config.display());
                    return ExitCode::from(EXIT_ERROR);
                }
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if threads == Some(0) {
                eprintln!("--threads must be positive");
                return ExitCode::from(EXIT_ERROR);
            }
            let dir = out
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| cfg.default_output_dir());
            match run_to_dir(&cfg, &dir, threads) {
                Ok(report) => {
                    for c in &report.checks {
                        println!("{c}");
                    }
                    let passed = report.passed();
                    println!("{}: {} ({})", cfg.kind.as_str(), if passed { "passed" } else { "FAILED" }, dir.display());
                    ExitCode::from(if passed { EXIT_PASS } else { EXIT_TOLERANCE })
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_ERROR)
                }
            }
        }
    }
}
