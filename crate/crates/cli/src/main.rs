use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mfrbp_cli::commands::{self, Strategy};
use mfrbp_cli::config::SchemeName;

#[derive(Parser)]
#[command(name = "mfrbp", version, about = "Multi-fidelity recursive behavior prediction")]
struct Cli {
    /// Root under which subcommands write when `--out` is not given.
    #[arg(long, env = "MFRBP_OUT", default_value = "mfrbp-out", global = true)]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic car-following traffic and split it into train/test datasets.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Read NGSIM-format trajectory files and split them into train/test datasets.
    Ingest {
        #[arg(long, num_args = 1.., required = true)]
        ngsim: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep every n-th frame (2 turns 10 Hz recordings into 5 Hz).
        #[arg(long, default_value_t = 1)]
        downsample: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train CSP and FC-CSP jointly and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides the config's scheme.
        #[arg(long, value_enum)]
        scheme: Option<SchemeName>,
        #[arg(long)]
        ckpt_out: PathBuf,
    },
    /// Run one recursion strategy on a scene file.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_enum)]
        strategy: Strategy,
        /// Ego vehicle; defaults to the scene file's `ego`.
        #[arg(long)]
        ego: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run experiment 1, 2 or 3 on a test dataset.
    Eval {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        experiment: u8,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        passes: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare an evaluation's RMSE table with a published reference column.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, value_parser = ["cspdag", "cspstar", "l1rbp", "l1mfrbp", "planning"])]
        reference: String,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let out = |given: Option<PathBuf>, name: &str| given.unwrap_or_else(|| cli.out_root.join(name));
    match cli.command {
        Command::Synth { config, seed, out: o } => commands::synth(config.as_deref(), seed, &out(o, "synth")),
        Command::Ingest { ngsim, seed, downsample, out: o } => commands::ingest(&ngsim, seed, downsample, &out(o, "ingest")),
        Command::Train { data, config, seed, scheme, ckpt_out } => commands::train(&data, config.as_deref(), seed, scheme, &ckpt_out),
        Command::Predict { ckpt, scene, strategy, ego, config, out: o } => {
            commands::predict(&ckpt, &scene, strategy, ego, config.as_deref(), &out(o, "predict"))
        }
        Command::Eval { experiment, data, ckpt, seed, passes, config, out: o } => {
            let dir = out(o, &format!("eval-exp{experiment}"));
            commands::eval(experiment, &data, &ckpt, seed, passes, config.as_deref(), &dir)
        }
        Command::Report { results, reference } => commands::report(&results, &reference),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
