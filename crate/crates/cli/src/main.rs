mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use arr_core::RetrievalMode;
use clap::{Args, Parser, Subcommand};

use crate::commands::UsageError;
use crate::config::Overrides;

#[derive(Parser)]
#[command(
    name = "arr",
    version,
    about = "Draft, retrieve and revise over a legal knowledge bank"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed a JSONL corpus and write the bank files.
    BuildBank(BuildBankArgs),
    /// Print the nearest paragraphs for a text or a query file.
    Retrieve(RetrieveArgs),
    /// Run draft, retrieval and revision over a query file.
    Pipeline(PipelineArgs),
    /// Score predictions against a gold file.
    Eval(EvalArgs),
    /// Compare query-based and answer-based retrieval recall@k.
    Ablate(AblateArgs),
}

#[derive(Args, Clone, Default)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    /// query | answer
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<RetrievalMode>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Hashing-embedder dimension.
    #[arg(long)]
    pub dim: Option<usize>,
}

fn parse_mode(s: &str) -> Result<RetrievalMode, String> {
    s.parse()
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            bank: self.bank.clone(),
            out: self.out.clone(),
            k: self.k,
            mode: self.mode,
            iterations: self.iterations,
            concurrency: self.concurrency,
            dim: self.dim,
            ..Default::default()
        }
    }
}

#[derive(Args)]
pub struct BuildBankArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// JSONL corpus: {"id"?, "title", "body", "source"?} per line.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Args)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, conflicts_with = "file")]
    pub text: Option<String>,
    /// JSONL queries: {"id", "query"} per line.
    #[arg(long)]
    pub file: Option<PathBuf>,
}

#[derive(Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub queries: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// JSONL gold file with gold_titles or relevant_ids.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    /// JSONL predictions: pipeline records, {"id","answer"} or {"id","ranked_ids"}.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Corpus whose titles form the title catalog (default: all gold titles).
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Cutoffs for recall@k and precision@k.
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,10")]
    pub ks: Vec<usize>,
    /// Plain substring title matching instead of normalized matching.
    #[arg(long)]
    pub raw_match: bool,
    /// Per-example CSV for error analysis.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub gold: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildBank(a) => commands::build_bank(a),
        Command::Retrieve(a) => commands::retrieve(a),
        Command::Pipeline(a) => commands::pipeline(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            if let Some(usage) = err.downcast_ref::<UsageError>() {
                eprintln!("error: {usage}\n\nFor more information, try '--help'.");
                return ExitCode::from(2);
            }
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
