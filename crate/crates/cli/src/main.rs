use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qkg_core::pipeline::EvalMode;

mod commands;
mod report;

#[derive(Parser)]
#[command(
    name = "qkg",
    version,
    about = "Context-dependent knowledge-graph validation for medical QA"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by commands that talk to a model.
#[derive(Args, Clone, Default)]
pub struct LlmArgs {
    /// YAML run configuration (roles, paths, workers).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scripted mock responses (JSON) or a previous `llm_calls.jsonl` to replay; replaces the network backend.
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
    /// Directory with prompt template overrides.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Import a knowledge-graph export (CSV or JSONL) into the JSONL graph format.
    ImportKg(commands::ImportKg),
    /// Build the two-layer subgraph around a target entity.
    ExtractSubgraph(commands::ExtractSubgraph),
    /// Generate or import per-relation applicability constraints.
    Annotate(commands::Annotate),
    /// Build a KG-grounded evaluation set from candidate questions.
    BuildDataset(commands::BuildDataset),
    /// Run the reasoner/validator pipeline over a dataset.
    RunEval(commands::RunEval),
    /// Paired comparison of two runs with an exact McNemar test.
    Compare(commands::Compare),
    /// Exact two-sided McNemar p-value for discordant counts.
    Mcnemar(commands::Mcnemar),
    /// Label revised cases as graph-supported, mixed or leakage.
    ClassifyLeakage(commands::ClassifyLeakage),
    /// Leakage-adjusted final accuracy.
    Adjust(commands::Adjust),
    /// Summary tables over one or more runs as text and CSV.
    Report(report::Report),
}

pub fn parse_mode(s: &str) -> Result<EvalMode, String> {
    s.parse::<EvalMode>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::ImportKg(a) => commands::import_kg(a),
        Command::ExtractSubgraph(a) => commands::extract_subgraph(a),
        Command::Annotate(a) => commands::annotate(a),
        Command::BuildDataset(a) => commands::build_dataset(a),
        Command::RunEval(a) => commands::run_eval(a),
        Command::Compare(a) => commands::compare(a),
        Command::Mcnemar(a) => commands::mcnemar(a),
        Command::ClassifyLeakage(a) => commands::classify_leakage(a),
        Command::Adjust(a) => commands::adjust(a),
        Command::Report(a) => report::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
