//! `ecgqa`: batch driver for fixture synthesis, retrieval indexing, prompt
//! preview and answering, toy training, evaluation and self-checks.

mod commands;
mod meta;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ecgqa_core::config::KeyValues;
use ecgqa_core::io_util::read_text;
use ecgqa_core::prompting::PromptTemplate;
use ecgqa_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "ecgqa",
    version,
    about = "ECG question answering: fixtures, retrieval index, training and evaluation"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Global seed; overrides `seed` from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Prompt template file replacing the built-in template.
    #[arg(long, global = true, value_name = "FILE")]
    template: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset: ECG records, paired reports, QA items and vocabulary.
    SynthFixtures(commands::SynthArgs),
    /// Encode every record of a dataset and save the report index.
    BuildIndex(commands::BuildIndexArgs),
    /// Retrieve reports for one ECG, render the prompt and generate an answer.
    Ask(commands::AskArgs),
    /// Tune the model on a dataset; writes checkpoints and a CSV loss log.
    Train(commands::TrainArgs),
    /// Answer every question of a dataset and write metric reports.
    Eval(commands::EvalArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(commands::GradCheckArgs),
    /// Time index construction and exact search on random vectors.
    BenchIndex(commands::BenchIndexArgs),
}

/// Configuration, seed and template shared by every command.
pub struct Context {
    /// Keys from `--config`, then `--set`, then `--seed`.
    pub kv: KeyValues,
    pub seed: u64,
    pub template: PromptTemplate,
}

impl Context {
    fn from_global(g: &Global) -> Result<Self> {
        let mut kv = match &g.config {
            Some(p) => KeyValues::parse(&read_text(p)?)?,
            None => KeyValues::new(),
        };
        for s in &g.set {
            let (k, v) = s
                .split_once('=')
                .filter(|(k, _)| !k.trim().is_empty())
                .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got {s:?}")))?;
            kv.set(k.trim(), v.trim());
        }
        if let Some(seed) = g.seed {
            kv.set("seed", seed);
        }
        let seed = kv.get_or("seed", 0)?;
        let template = match &g.template {
            Some(p) => PromptTemplate::load(p)?,
            None => PromptTemplate::default(),
        };
        Ok(Self { kv, seed, template })
    }
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Context::from_global(&cli.global)?;
    match cli.command {
        Command::SynthFixtures(a) => commands::synth_fixtures(&ctx, a),
        Command::BuildIndex(a) => commands::build_index(&ctx, a),
        Command::Ask(a) => commands::ask(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::GradCheck(a) => commands::grad_check(a),
        Command::BenchIndex(a) => commands::bench_index(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io_or_format() { 2 } else { 1 })
        }
    }
}
