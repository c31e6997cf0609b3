use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

use commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "higen", version, about = "Hierarchy-aware sequence-to-sequence text classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; also the data directory unless `paths.data` is set.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Configuration override, applied after the file. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run seed, applied last.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate the synthetic taxonomy, vocabulary and dataset splits.
    GenData,
    /// Masked label-sequence pretraining on the weakly labelled corpus.
    Pretrain,
    /// Fine-tune with the composite objective.
    Train,
    /// Score a checkpoint on the test split.
    Eval,
    /// Full model against each single-component ablation.
    Ablate,
    /// Sweep the structural loss weights.
    Grid,
    /// Finite-difference checks of every analytic gradient.
    Gradcheck,
    /// Test scores after fine-tuning on fractions of the training split.
    DataEfficiency,
    /// Jaccard overlap of two JSONL corpora.
    Overlap,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => higen::config::Config::load(p)?,
        None => higen::config::Config::default(),
    };
    for kv in &cli.set {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    higen::exec::init_threads();
    let ctx = commands::Context::new(cfg, cli.out.clone())?;
    match cli.command {
        Command::GenData => ctx.gen_data(),
        Command::Pretrain => ctx.pretrain(),
        Command::Train => ctx.train(),
        Command::Eval => ctx.eval(),
        Command::Ablate => ctx.ablate(),
        Command::Grid => ctx.grid(),
        Command::Gradcheck => ctx.gradcheck(),
        Command::DataEfficiency => ctx.data_efficiency(),
        Command::Overlap => ctx.overlap(),
    }
}
