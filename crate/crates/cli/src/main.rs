//! Command-line runner for decentralized random-walk federated learning experiments.

mod commands;
mod config;
mod run;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dfedrw::Error;

use crate::config::{load_config, ExperimentConfig};

#[derive(Parser)]
#[command(name = "dfedrw", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML experiment configuration.
    config: PathBuf,
    /// Override a config key, e.g. `--set training.epochs=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (same as `--set output=...`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = load_config(&self.config, &self.overrides)?;
        if let Some(out) = &self.out {
            cfg.output = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and write metrics.csv, summary.json and the config echo.
    Run(ConfigArgs),
    /// Evaluate the convergence-bound terms and the quantization check.
    Bound {
        #[command(flatten)]
        args: ConfigArgs,
        /// Step horizon k (default: rounds × epochs).
        #[arg(long)]
        horizon: Option<u64>,
    },
    /// Materialize the device partition and its label histogram.
    Partition(ConfigArgs),
    /// Run one experiment per value of an axis (u, h, b, K, topology, algorithm).
    Sweep {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Summarize a trace.jsonl message log.
    Inspect {
        trace: PathBuf,
        #[arg(long)]
        round: Option<u64>,
        /// Print every message.
        #[arg(short, long)]
        verbose: bool,
    },
}

fn exit_code(err: &Error) -> u8 {
    if err.is_numeric() {
        3
    } else {
        2
    }
}

fn dispatch(command: Command) -> Result<(), Error> {
    match command {
        Command::Run(args) => {
            let s = run::cmd_run(&args.load()?)?;
            println!(
                "{} rounds: accuracy {:.4}, loss {:.4}, {} bits total -> {}",
                s.rounds,
                s.final_accuracy,
                s.final_loss,
                s.cum_bits_total,
                s.config.output.display()
            );
        }
        Command::Bound { args, horizon } => {
            let cfg = args.load()?;
            let b = commands::cmd_bound(&cfg, horizon)?;
            println!(
                "k = {}: full precision {:.6}, quantized {:.6}, saves communication: {}",
                b.horizon,
                b.theorem1.total_bound,
                b.theorem2.total_bound,
                b.proposition1.saves_communication
            );
            for flag in b.theorem1.flags.iter().chain(&b.step_size.flags) {
                eprintln!("warning: {flag}");
            }
        }
        Command::Partition(args) => {
            let cfg = args.load()?;
            let hists = commands::cmd_partition(&cfg)?;
            println!("{} devices -> {}", hists.len(), cfg.output.display());
        }
        Command::Sweep { args, axis, values } => {
            let cfg = args.load()?;
            let failures = commands::cmd_sweep(&cfg, &axis, &values)?;
            println!(
                "{} of {} cells succeeded -> {}",
                values.len() - failures.len(),
                values.len(),
                cfg.output.join("sweep.csv").display()
            );
            for f in &failures {
                eprintln!("failed: {axis}={}", f.value);
            }
            if let Some(worst) = failures.into_iter().max_by_key(|f| exit_code(&f.error)) {
                return Err(worst.error);
            }
        }
        Command::Inspect { trace, round, verbose } => {
            print!("{}", commands::cmd_inspect(&trace, round, verbose)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
