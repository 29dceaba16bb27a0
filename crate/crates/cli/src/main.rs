//! `vdan`: synthetic CSI experiments from the command line.
//!
//! Exit status is 0 on success, 1 for invalid arguments, configs or
//! missing inputs, and 2 when a run fails.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "vdan", version, about = "Variational dual-path attention experiments on synthetic CSI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON file of flat dotted keys, applied on top of the defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// `key=value` overrides, applied after the config file.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset written by `synth`; regenerated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved config as flat dotted keys.
    Config(ConfigArgs),
    /// Generate a clean dataset file.
    Synth(ConfigArgs),
    /// Train the configured variant once per listed seed.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write test-split metrics of a checkpoint as JSON.
    Eval(ModelArgs),
    /// Train every variant for every seed and summarise accuracy.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Accuracy of a checkpoint on the clean test split at each noise level.
    SnrSweep(ModelArgs),
    /// Per-sample attention weights, reference profiles and masks as CSV.
    InspectAttention(ModelArgs),
    /// Finite-difference gradient check of every variant on a tiny model.
    Gradcheck {
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        /// Seed of the tiny models, their input sample and the frozen noise.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    use commands as c;
    match cli.command {
        Command::Config(args) => c::show_config(&args.resolve()?),
        Command::Synth(args) => c::synth(&args.resolve()?),
        Command::Train { data, config } => c::train(&config.resolve()?, data.as_deref()),
        Command::Eval(args) => c::eval(&args.config.resolve()?, &args.checkpoint, args.data.as_deref()),
        Command::Ablate { data, config } => c::ablate(&config.resolve()?, data.as_deref()),
        Command::SnrSweep(args) => c::sweep(&args.config.resolve()?, &args.checkpoint, args.data.as_deref()),
        Command::InspectAttention(args) => {
            c::inspect_attention(&args.config.resolve()?, &args.checkpoint, args.data.as_deref())
        }
        Command::Gradcheck { tolerance, step, seed, config } => c::gradcheck(&config.resolve()?, tolerance, step, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
