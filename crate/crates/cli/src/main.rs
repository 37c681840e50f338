//! `cahfp`: run federated-pruning experiments from JSON configs,
//! summarize finished runs, and execute the built-in self-check
//! oracles.
//!
//! Exit codes: 0 success, 1 configuration error, 2 numeric fault
//! during a run, 3 oracle failure.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cahfp_core::error::Error;
use cahfp_core::experiment::{self, ExperimentConfig};
use cahfp_core::oracle;

#[derive(Parser)]
#[command(name = "cahfp", version, about = "Curvature-aware heterogeneous federated pruning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config file.
    Run {
        /// Path to the config (JSON).
        config: PathBuf,
        /// Output directory (overrides config and CAHFP_OUT_DIR).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render a comparison table over completed run directories.
    Summarize {
        /// Run directories (or directories of runs).
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Execute the built-in verification oracles and print pass/fail.
    Oracle {
        /// Config whose seed keys the oracle fixtures.
        config: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::NumericFault { .. } => 2,
        Error::OracleFailure(_) => 3,
        _ => 1,
    }
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.clone(), e))?;
    experiment::parse_config(&text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out_dir = experiment::resolve_out_dir(&cfg, out.as_deref());
            let summaries = experiment::run_experiment(&cfg, &out_dir)?;
            for s in &summaries {
                let status = if s.failed {
                    "failed".to_string()
                } else {
                    match s.final_test_acc {
                        Some(a) => format!("test acc {:.2}%", a * 100.0),
                        None => "ok".to_string(),
                    }
                };
                println!(
                    "{} [criterion={} reconstruction={} alpha={} seed={}] {}",
                    s.dir.display(),
                    s.criterion.label(),
                    s.reconstruction.label(),
                    s.alpha,
                    s.seed,
                    status
                );
            }
            Ok(())
        }
        Command::Summarize { dirs } => {
            let summary = experiment::summarize(&dirs)?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", summary.text);
            let csv_path = match std::env::var(experiment::OUT_DIR_ENV) {
                Ok(dir) if !dir.is_empty() => PathBuf::from(dir).join("summary.csv"),
                _ => PathBuf::from("summary.csv"),
            };
            fs::write(&csv_path, &summary.csv).map_err(|e| Error::io(csv_path.clone(), e))?;
            println!("\nwrote {}", csv_path.display());
            Ok(())
        }
        Command::Oracle { config } => {
            let cfg = load_config(&config)?;
            let report = oracle::run_oracles(cfg.seed)?;
            for check in &report.checks {
                let status = if check.passed { "PASS" } else { "FAIL" };
                println!("[{status}] {}: {}", check.name, check.detail);
            }
            if report.passed() {
                println!("all oracle checks passed");
                Ok(())
            } else {
                Err(Error::OracleFailure(
                    "one or more oracle checks failed".to_string(),
                ))
            }
        }
    }
}
