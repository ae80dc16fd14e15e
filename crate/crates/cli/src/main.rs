//! `cotrain`: synthetic corpora, training, evaluation and gradient checks.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.

mod commands;
mod manifest;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(
    name = "cotrain",
    version,
    about = "Co-training of discrete symbol encoders on a mutual-information lower bound"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its exact mutual information.
    Synth(SynthArgs),
    /// Train both encoders on a corpus.
    Train(TrainArgs),
    /// Label, tag and score a corpus with a checkpoint.
    Eval(EvalArgs),
    /// Compare every analytic gradient with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// JSON synthetic spec.
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Base,
    Adversarial,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EntropyModeArg {
    PerUtterance,
    Global,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Corpus directory or manifest file.
    corpus: PathBuf,
    /// JSON training config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    entropy_mode: Option<EntropyModeArg>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Schedule as `start:end:lr` segments separated by commas, in hundreds
    /// of utterances.
    #[arg(long)]
    lr_schedule: Option<String>,
    /// Hundreds of utterances before cloning, or `none`.
    #[arg(long)]
    clone_at: Option<String>,
    /// Also checkpoint every N utterances (epoch ends always checkpoint).
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Labeled corpus directory or manifest file.
    corpus: PathBuf,
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// First seed; seeds `seed .. seed + seeds` are checked.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Perturb every analytic gradient by this amount (test fixture).
    #[arg(long, hide = true, default_value_t = 0.0)]
    corrupt: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                commands::EXIT_USAGE
            } else {
                0
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
