mod check;
mod inspect;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use output::Output;

/// Inspect, verify and exercise the omnicond conditioning stack.
#[derive(Debug, Parser)]
#[command(name = "omnicond", version)]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Divide every step count by this factor.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    scale: u64,
    /// Directory for artifacts. Without it the main artifact goes to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a caption file and dump its structure as JSON.
    Parse {
        #[arg(long)]
        caption: PathBuf,
        /// Write the dump here instead of the output directory.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Assign anchored rotary coordinates to a caption and its references.
    Positions {
        #[arg(long)]
        caption: PathBuf,
        #[command(flatten)]
        refs: RefArgs,
    },
    /// Print the speech mask of a caption.
    Mask {
        #[arg(long)]
        caption: PathBuf,
    },
    /// Run speech gating and context fusion on random embeddings.
    OcfDemo {
        #[arg(long)]
        caption: PathBuf,
        #[command(flatten)]
        dims: DimArgs,
        #[command(flatten)]
        refs: RefArgs,
    },
    /// Train the full pipeline on the synthetic paired task.
    TrainToy {
        #[arg(long, default_value_t = 500)]
        steps: usize,
        /// Fail unless the held-out loss drops by at least this fraction.
        #[arg(long)]
        min_reduction: Option<f64>,
    },
    /// Export the interleaved training plan as CSV.
    Schedule {
        /// `default` or a JSON/TOML configuration file.
        #[arg(long, default_value = "default")]
        stages: String,
    },
    /// Run invariant checks. Runs all of them when no flag is given.
    Check(check::CheckArgs),
}

#[derive(Debug, Clone, Args)]
struct DimArgs {
    /// Prompt embedding width.
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
}

#[derive(Debug, Clone, Args)]
struct RefArgs {
    /// Reference image grid per subject, as `HxW`.
    #[arg(long, default_value = "2x2")]
    grid: String,
    /// Reference audio tokens per subject.
    #[arg(long, default_value_t = 2)]
    audio: usize,
    /// TTS tokens per utterance. Zero means one per content token.
    #[arg(long, default_value_t = 0)]
    tts: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version go to stdout with status 0, usage errors to
            // stderr with status 2.
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let out = Output::new(cli.out)?;
    let scale = cli.scale as usize;
    match cli.command {
        Command::Parse { caption, json } => inspect::parse(&caption, json.as_deref(), &out),
        Command::Positions { caption, refs } => inspect::positions(&caption, &refs, &out),
        Command::Mask { caption } => inspect::mask(&caption, &out),
        Command::OcfDemo { caption, dims, refs } => run::ocf_demo(&caption, &dims, &refs, cli.seed, &out),
        Command::TrainToy { steps, min_reduction } => run::train_toy(steps, scale, min_reduction, cli.seed, &out),
        Command::Schedule { stages } => run::schedule(&stages, scale, &out),
        Command::Check(args) => check::run(&args, cli.seed, &out),
    }
}
