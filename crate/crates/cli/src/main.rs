//! `atomrag` command-line front end.

mod commands;
mod config;
mod corpus;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use atomrag::evaluation::BenchmarkFormat;
use atomrag::solver::Method;
use clap::{ArgAction, Parser, Subcommand};
use serde_json::json;
use tracing_subscriber::EnvFilter;

/// A failure reported as one JSON line on stderr.
#[derive(Debug)]
pub struct CliError {
    /// 1 for user errors, 2 for gateway or environment errors.
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl fmt::Display) -> Self {
        Self {
            code: 1,
            kind: "usage",
            message: msg.to_string(),
        }
    }

    pub fn env(msg: impl fmt::Display) -> Self {
        Self {
            code: 2,
            kind: "environment",
            message: msg.to_string(),
        }
    }

    pub fn gateway(msg: impl fmt::Display) -> Self {
        Self {
            code: 2,
            kind: "gateway",
            message: msg.to_string(),
        }
    }

    fn line(&self) -> String {
        json!({"error": {"code": self.code, "kind": self.kind, "message": self.message}}).to_string()
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::env(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::env(format!("cannot write {}: {e}", path.display())))
}

#[derive(Debug, Parser)]
#[command(name = "atomrag", version, about = "Layered knowledge base and knowledge-aware question decomposition")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-document and per-question work.
    #[arg(long, global = true, default_value_t = 4)]
    parallel: usize,
    /// Log verbosity (-v info, -vv debug); RUST_LOG overrides.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build or update a knowledge-base archive from a corpus.
    Ingest {
        /// Directory of .txt files (with optional .meta.json sidecars) or a .jsonl file.
        #[arg(long, required_unless_present = "benchmark")]
        corpus: Option<PathBuf>,
        /// Ingest the context paragraphs of a benchmark file instead.
        #[arg(long, conflicts_with = "corpus", requires = "format")]
        benchmark: Option<PathBuf>,
        #[arg(long)]
        format: Option<BenchmarkFormat>,
        /// Archive path; defaults to kb.path, then <output.dir>/kb.atomrag.
        #[arg(long)]
        kb: Option<PathBuf>,
    },
    /// Answer one question.
    Solve {
        #[arg(long)]
        method: Method,
        #[arg(long, required_unless_present = "question_file", conflicts_with = "question_file")]
        question: Option<String>,
        #[arg(long)]
        question_file: Option<PathBuf>,
        #[arg(long)]
        kb: Option<PathBuf>,
        /// Defaults to <output.dir>/transcript.json.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Score a method on a benchmark file.
    Eval {
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long)]
        format: BenchmarkFormat,
        #[arg(long)]
        method: Method,
        /// Evaluate a seeded random sample of this many questions.
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Grade accuracy with the model judge.
        #[arg(long)]
        judge: bool,
        #[arg(long)]
        kb: Option<PathBuf>,
    },
    /// Collect exploration trajectories for decomposer training.
    Collect {
        #[arg(long)]
        qa: PathBuf,
        #[arg(long, default_value = "records")]
        format: BenchmarkFormat,
        #[arg(long)]
        kb: Option<PathBuf>,
        /// Defaults to <output.dir>/trajectories.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn a trajectory archive into supervised fine-tuning pairs.
    ExportSft {
        #[arg(long)]
        trajectories: PathBuf,
        /// Defaults to <output.dir>/sft.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also export trajectories that missed the keep threshold.
        #[arg(long)]
        include_rejected: bool,
    },
    /// Write the synthetic chain corpus and questions described by [synthetic].
    Synth {
        /// Defaults to <output.dir>/synthetic.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = config::RunConfig::load(cli.config.as_deref())?;
    if cli.parallel == 0 {
        return Err(CliError::usage("--parallel must be at least 1"));
    }
    let ctx = commands::Context {
        cfg,
        parallel: cli.parallel,
    };
    match cli.command {
        Command::Ingest {
            corpus,
            benchmark,
            format,
            kb,
        } => commands::ingest(&ctx, corpus, benchmark.zip(format), kb),
        Command::Solve {
            method,
            question,
            question_file,
            kb,
            transcript,
        } => {
            let question = match (question, question_file) {
                (Some(q), _) => q,
                (None, Some(p)) => fs::read_to_string(&p)
                    .map_err(|e| CliError::usage(format!("cannot read {}: {e}", p.display())))?
                    .trim()
                    .to_string(),
                (None, None) => return Err(CliError::usage("give --question or --question-file")),
            };
            commands::solve(&ctx, method, &question, kb, transcript)
        }
        Command::Eval {
            benchmark,
            format,
            method,
            sample,
            seed,
            judge,
            kb,
        } => commands::eval(&ctx, &benchmark, format, method, sample, seed, judge, kb),
        Command::Collect { qa, format, kb, out } => commands::collect(&ctx, &qa, format, kb, out),
        Command::ExportSft {
            trajectories,
            out,
            include_rejected,
        } => commands::export_sft(&ctx, &trajectories, out, include_rejected),
        Command::Synth { out, seed } => commands::synth(&ctx, out, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let err = CliError::usage(e.kind());
            eprintln!("{}", err.line());
            return ExitCode::from(err.code);
        }
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.code)
        }
    }
}
