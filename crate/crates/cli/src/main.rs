//! `sonarllm`: corpus generation, codec pretraining, training, generation,
//! evaluation and cost analysis from one binary.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "sonarllm",
    version,
    about = "Sentence-level language modelling over a frozen sentence codec"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic corpus file.
    GenCorpus(commands::GenCorpusArgs),
    /// Train the sentence codec and save it as a checkpoint.
    PretrainCodec(commands::PretrainArgs),
    /// Train a model over a frozen codec.
    Train(commands::TrainArgs),
    /// Continue a prompt sentence by sentence.
    Generate(commands::GenerateArgs),
    /// Next-sentence BLEU, ROUGE-L and METEOR-lite scores.
    EvalNlg(commands::EvalArgs),
    /// Fit L(N) = a·N^-α + b to a CSV of (N, loss) points.
    FitScaling(commands::FitArgs),
    /// Inference FLOPs of token-level and sentence-level generation.
    Flops(commands::FlopsArgs),
    /// Finite-difference gradient check of every objective.
    Gradcheck(commands::GradcheckArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
