//! `motionlab`: data synthesis, training, generation, evaluation and
//! artifact inspection behind one subcommand-style binary.

mod commands;
mod error;
mod export;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{
    EvaluateArgs, ExportEmbeddingsArgs, GenerateArgs, InspectArgs, SynthArgs, TrainAeArgs, TrainEvalArgs,
    TrainGenArgs,
};
use crate::error::CliError;

const THREADS_ENV: &str = "MOLINGO_LAB_THREADS";

#[derive(Parser, Debug)]
#[command(name = "motionlab", version, about = "Text-to-motion toolkit: synthesize data, train, generate and evaluate")]
struct Cli {
    /// Worker threads; defaults to $MOLINGO_LAB_THREADS, else 1.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr; repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic labeled motion corpus.
    SynthData(SynthArgs),
    /// Train a motion autoencoder (ae, vae or sae).
    TrainAe(TrainAeArgs),
    /// Train the masked generator on a frozen autoencoder's latents.
    TrainGen(TrainGenArgs),
    /// Train the contrastive text-motion evaluator.
    TrainEval(TrainEvalArgs),
    /// Generate a motion from a prompt.
    Generate(GenerateArgs),
    /// Score a generator against a corpus and write a JSON report.
    Evaluate(EvaluateArgs),
    /// Write toy-encoder embeddings for a list of prompts.
    ExportEmbeddings(ExportEmbeddingsArgs),
    /// Describe a checkpoint, corpus or embedding file and its manifest.
    Inspect(InspectArgs),
}

fn thread_count(flag: Option<usize>) -> Result<usize, CliError> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
            Err(_) => 1,
        },
    };
    if n == 0 {
        return Err(CliError::Usage("thread count must be at least 1".into()));
    }
    Ok(n)
}

fn run(cli: Cli, command_line: String) -> Result<(), CliError> {
    let threads = thread_count(cli.threads)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot start {threads} worker threads: {e}")))?;
    let ctx = commands::Context::new(command_line);
    match cli.command {
        Command::SynthData(a) => commands::synth_data(&ctx, a),
        Command::TrainAe(a) => commands::train_ae(&ctx, a),
        Command::TrainGen(a) => commands::train_gen(&ctx, a),
        Command::TrainEval(a) => commands::train_eval(&ctx, a),
        Command::Generate(a) => commands::generate(&ctx, a),
        Command::Evaluate(a) => commands::evaluate(&ctx, a),
        Command::ExportEmbeddings(a) => commands::export_embeddings(&ctx, a),
        Command::Inspect(a) => commands::inspect(a),
    }
}

fn main() -> ExitCode {
    let argv: Vec<OsString> = std::env::args_os().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    let command_line = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect::<Vec<_>>().join(" ");
    match run(cli, command_line) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code())
        }
    }
}
