use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dalebp::error::{HarnessError, Result};
use dalebp::experiments::{self, traces, Sink};
use dalebp::train::train_from_config;
use dalebp::ExperimentConfig;
use dalebp_core::checkpoint::Checkpoint;

#[derive(Parser)]
#[command(name = "dalebp", version, about = "Dale-constrained spiking networks trained by random error backpropagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on MNIST and write epochs.csv, summary.json and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment: apical_slope, anti_hebbian, assembly, angle or
    /// microcircuit_traces.
    Experiment {
        id: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the microcircuit waveforms with the golden CSVs.
    VerifyTraces {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Rewrite the golden files from the current simulation instead.
        #[arg(long)]
        bless: bool,
    },
    /// Print the contents of a checkpoint.
    InspectCheckpoint { path: PathBuf },
}

fn load(config: Option<&Path>) -> Result<ExperimentConfig> {
    match config {
        Some(p) => Ok(ExperimentConfig::load(p)?.0),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = load(Some(&config))?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let report = train_from_config(&cfg, Some(&dir))?;
            println!(
                "final test accuracy {:.2}% (best {:.2}%), results in {}",
                100.0 * report.final_test_acc,
                100.0 * report.best_test_acc,
                dir.display()
            );
        }
        Command::Experiment { id, config, out } => {
            let cfg = load(config.as_deref())?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let summary = experiments::run_by_id(&id, &cfg, &Sink::new(&dir, cfg.hash()))?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::VerifyTraces { config, bless } => {
            let cfg = load(config.as_deref())?;
            if bless {
                traces::bless(&cfg.traces)?;
                println!("golden traces written to {}", cfg.traces.golden_dir.display());
            } else {
                traces::verify(&cfg.traces)?;
                println!("all microcircuit traces match");
            }
        }
        Command::InspectCheckpoint { path } => {
            let ck = Checkpoint::load(&path).map_err(HarnessError::from)?;
            println!("seed: {}", ck.seed);
            for m in &ck.matrices {
                let (r, c) = m.shape();
                let v = m.values();
                let mean = v.mean().unwrap_or(0.0);
                let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                println!("{:<24} {r:>4} x {c:<4} {:?}  mean {mean:.4e}  max {max:.4e}", m.name(), m.pre_sign());
            }
            match &ck.optimizer {
                Some(o) => println!("optimizer: {:?}, step {}", o.kind, o.step),
                None => println!("optimizer: none"),
            }
            println!("config:\n{}", ck.config);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
