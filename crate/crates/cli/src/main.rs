//! `dualatt`: synthesise slides, train, evaluate and inspect.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure during training, 1 anything else.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dualatt::Error;

#[derive(Parser)]
#[command(name = "dualatt", version, about = "Dual soft/hard attention scoring of slide images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources shared by every command. Later sources win:
/// preset defaults, then the file, then `--preset`, then each `--set`.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a single key, e.g. `--set train.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset: slide pyramids, ROI masks and labels.csv.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train on a dataset and write a run directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Run directory; created if missing, refused while locked.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        #[arg(long, value_enum, default_value = "f32")]
        precision: Precision,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a split of a dataset with a checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Directory for metrics.json and metrics.csv; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides applied on top of the checkpoint's own configuration.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Attention overlays per checkpoint, glimpse contact sheets and the
    /// processed-pixel fraction for one slide.
    Inspect {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        slide: String,
        /// Checkpoint to inspect. Repeatable; the last one also gets
        /// contact sheets and traces.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Use every checkpoint in a run directory instead.
        #[arg(long, conflicts_with = "checkpoint")]
        run: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the fully resolved configuration.
    Config {
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PresetArg {
    Her2,
    Mmr,
    Reduced,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Version { .. } | Error::InvalidArgument(_) => 2,
        Error::Io { .. }
        | Error::Image { .. }
        | Error::Format(_)
        | Error::Json(_)
        | Error::Locked(_)
        | Error::ShapeMismatch { .. }
        | Error::SingleClass => 3,
        Error::NonFinite { .. } => 4,
        Error::EpisodeFinished(_) => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { out, config } => commands::synth(&out, &config),
        Command::Train { data, run, preset, precision, config } => commands::train(&data, &run, preset, precision, &config),
        Command::Eval { data, checkpoint, split, out, sets } => commands::eval(&data, &checkpoint, split, out.as_deref(), &sets),
        Command::Inspect { data, slide, checkpoint, run, out } => commands::inspect(&data, &slide, &checkpoint, run.as_deref(), &out),
        Command::Config { preset, config } => commands::print_config(preset, &config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
