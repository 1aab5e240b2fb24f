//! `psa` — turn a physics question into a narrated explainer video through
//! staged model calls, then score it and log analytics.
//!
//! Exit codes: 0 success, 1 pipeline/stage failure, 2 usage or input error.

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use psa_core::config::PipelineConfig;
use psa_core::domain::{derive_question_id, Category, PhysicsQuestion, Version};
use psa_core::gateway::{CommandTransport, Gateway, GatewayMode};
use psa_core::pipeline::{Pipeline, RunOptions};
use psa_core::rag::{self, HashedBagOfWords, RagIndex};
use psa_core::reporting;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "psa",
    version,
    about = "Physics explainer-video generation and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build (or rebuild) the documentation retrieval index.
    Index {
        /// Directory of .md/.txt/.rst documentation files.
        #[arg(long)]
        docs_dir: PathBuf,
        /// Output index directory (replaced atomically).
        #[arg(long)]
        out: PathBuf,
        /// Chunk window size in characters.
        #[arg(long, default_value_t = 1200)]
        chunk_size: usize,
        /// Characters repeated between adjacent chunks.
        #[arg(long, default_value_t = 200)]
        overlap: usize,
    },
    /// Run the full pipeline on one question.
    Generate {
        /// Plain-text file holding the question.
        #[arg(long)]
        question_file: PathBuf,
        /// Question category: easy, medium, hard or theorem.
        #[arg(long)]
        category: String,
        /// Explicit question id (defaults to a content hash of the text).
        #[arg(long)]
        id: Option<String>,
        /// Root directory for run artifacts.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cumulative CSV path.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Gateway mode: record, replay or live.
        #[arg(long)]
        cassette: String,
        /// Cassette file for record/replay modes.
        #[arg(long)]
        cassette_file: Option<PathBuf>,
        /// Stop after version 1; skip the visual refinement pass.
        #[arg(long)]
        skip_refine: bool,
        /// Retrieval index directory built by `psa index`.
        #[arg(long)]
        rag_index: Option<PathBuf>,
        /// Pipeline configuration TOML.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Re-score an existing run directory from its artifacts.
    Evaluate {
        /// A run directory: <out>/runs/<question_id>.
        #[arg(long)]
        run_dir: PathBuf,
        /// Cumulative CSV path whose rows get rewritten.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Gateway mode: record, replay or live.
        #[arg(long, default_value = "replay")]
        cassette: String,
        /// Cassette file for record/replay modes.
        #[arg(long)]
        cassette_file: Option<PathBuf>,
        /// Pipeline configuration TOML.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print per-category statistics from the cumulative CSV.
    Report {
        /// Cumulative CSV path.
        #[arg(long)]
        csv: PathBuf,
        /// Restrict to one version: v1 or v2.
        #[arg(long)]
        version: Option<String>,
        /// Emit JSON instead of the aligned table.
        #[arg(long)]
        json: bool,
    },
}

/// Failures that should exit 2 (bad input) rather than 1 (pipeline error).
struct UsageError(anyhow::Error);

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, UsageError> {
    let mut config = match path {
        Some(p) => PipelineConfig::load(p)
            .with_context(|| format!("loading config {}", p.display()))
            .map_err(UsageError)?,
        None => PipelineConfig::default(),
    };
    config.apply_env_overrides(std::env::vars());
    Ok(config)
}

fn build_gateway(
    config: &PipelineConfig,
    mode_flag: &str,
    cassette_file: Option<&Path>,
) -> Result<Gateway, UsageError> {
    let mode = GatewayMode::parse(mode_flag).ok_or_else(|| {
        UsageError(anyhow!(
            "unknown cassette mode '{mode_flag}' (expected record, replay or live)"
        ))
    })?;
    let cassette = cassette_file
        .map(Path::to_path_buf)
        .or_else(|| config.gateway.cassette.clone());
    let transport = || -> Result<Box<CommandTransport>, UsageError> {
        let argv = match std::env::var("PSA_LLM_CMD") {
            Ok(cmd) => cmd.split_whitespace().map(str::to_string).collect(),
            Err(_) => config.gateway.live_cmd.clone(),
        };
        if argv.is_empty() {
            return Err(UsageError(anyhow!(
                "live transport required for '{mode_flag}' mode: set [gateway].live_cmd in the config or PSA_LLM_CMD"
            )));
        }
        Ok(Box::new(CommandTransport { argv }))
    };
    let gateway = match mode {
        GatewayMode::Replay => {
            let path = cassette.ok_or_else(|| {
                UsageError(anyhow!(
                    "replay mode needs --cassette-file or [gateway].cassette"
                ))
            })?;
            Gateway::replay(&path)
                .with_context(|| format!("loading cassette {}", path.display()))
                .map_err(UsageError)?
        }
        GatewayMode::Record => {
            let path = cassette.ok_or_else(|| {
                UsageError(anyhow!(
                    "record mode needs --cassette-file or [gateway].cassette"
                ))
            })?;
            Gateway::record(&path, transport()?, config.gateway.retry.clone())
                .with_context(|| format!("opening cassette {}", path.display()))
                .map_err(UsageError)?
        }
        GatewayMode::Live => Gateway::live(transport()?, config.gateway.retry.clone()),
    };
    Ok(gateway)
}

fn cmd_index(
    docs_dir: &Path,
    out: &Path,
    chunk_size: usize,
    overlap: usize,
) -> Result<ExitCode, anyhow::Error> {
    if !docs_dir.is_dir() {
        eprintln!("error: docs dir not found: {}", docs_dir.display());
        return Ok(ExitCode::from(2));
    }
    let docs = rag::read_corpus_dir(docs_dir)?;
    let index = match RagIndex::build(
        &docs,
        chunk_size,
        overlap,
        Box::new(HashedBagOfWords::default()),
    ) {
        Ok(index) => index,
        Err(rag::RagError::EmptyCorpus) => {
            eprintln!("error: no indexable text under {}", docs_dir.display());
            return Ok(ExitCode::from(2));
        }
        Err(e) => return Err(e.into()),
    };
    index.save(out)?;
    println!(
        "indexed {} chunks into {}",
        index.chunks.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    question_file: &Path,
    category: &str,
    id: Option<String>,
    out: Option<PathBuf>,
    csv: Option<PathBuf>,
    cassette: &str,
    cassette_file: Option<&Path>,
    skip_refine: bool,
    rag_index: Option<&Path>,
    config_path: Option<&Path>,
) -> Result<ExitCode, anyhow::Error> {
    let Some(category) = Category::parse(category) else {
        eprintln!("error: unknown category '{category}' (expected easy, medium, hard or theorem)");
        return Ok(ExitCode::from(2));
    };
    if !question_file.is_file() {
        eprintln!(
            "error: question file not found: {}",
            question_file.display()
        );
        eprintln!(
            "usage: psa generate --question-file <FILE> --category <CATEGORY> --cassette <MODE>"
        );
        return Ok(ExitCode::from(2));
    }
    let text = std::fs::read_to_string(question_file)?.trim().to_string();
    if text.is_empty() {
        eprintln!("error: question file is empty: {}", question_file.display());
        return Ok(ExitCode::from(2));
    }

    let mut config = match load_config(config_path) {
        Ok(c) => c,
        Err(UsageError(e)) => {
            eprintln!("error: {e:#}");
            return Ok(ExitCode::from(2));
        }
    };
    if let Some(out) = out {
        config.paths.out_dir = out;
    }
    if let Some(csv) = csv {
        config.paths.csv = csv;
    } else if csv_is_default(&config) {
        config.paths.csv = config.paths.out_dir.join("results.csv");
    }

    let gateway = match build_gateway(&config, cassette, cassette_file) {
        Ok(g) => g,
        Err(UsageError(e)) => {
            eprintln!("error: {e:#}");
            return Ok(ExitCode::from(2));
        }
    };

    let index_dir = rag_index
        .map(Path::to_path_buf)
        .or_else(|| config.retrieval.index_dir.clone());
    let rag = match &index_dir {
        Some(dir) => Some(
            RagIndex::load(dir, Box::new(HashedBagOfWords::default()))
                .with_context(|| format!("loading retrieval index {}", dir.display()))?,
        ),
        None => None,
    };

    let question = PhysicsQuestion {
        id: id.unwrap_or_else(|| derive_question_id(&text)),
        text,
        category,
    };
    let pipeline = Pipeline {
        gateway: &gateway,
        config: &config,
        rag: rag.as_ref(),
    };
    match pipeline.run(&question, &RunOptions { skip_refine }) {
        Ok(outcome) => {
            for warning in &outcome.warnings {
                eprintln!("warning: {warning}");
            }
            for record in &outcome.records {
                println!(
                    "{} {} OS={:.3} VQ={:.3} EP={:.3} fixes={} aborted={}",
                    record.question_id,
                    record.version,
                    record.overall_score,
                    record.visual_quality,
                    record.error_penalty_score,
                    record.fix_attempts_total,
                    record.scenes_aborted
                );
            }
            println!("artifacts: {}", outcome.run_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Err(failure) => {
            eprintln!("error: {}", failure.error);
            if failure.failure_record.is_some() {
                eprintln!(
                    "a failure row was appended to {}",
                    config.paths.csv.display()
                );
            }
            Ok(ExitCode::from(1))
        }
    }
}

fn csv_is_default(config: &PipelineConfig) -> bool {
    config.paths.csv == Path::new("results.csv")
}

fn cmd_evaluate(
    run_dir: &Path,
    csv: Option<PathBuf>,
    cassette: &str,
    cassette_file: Option<&Path>,
    config_path: Option<&Path>,
) -> Result<ExitCode, anyhow::Error> {
    let config = match load_config(config_path) {
        Ok(c) => c,
        Err(UsageError(e)) => {
            eprintln!("error: {e:#}");
            return Ok(ExitCode::from(2));
        }
    };
    if !run_dir.join("run.json").is_file() {
        eprintln!(
            "error: incomplete run directory (no run.json): {}",
            run_dir.display()
        );
        return Ok(ExitCode::from(1));
    }
    let gateway = match build_gateway(&config, cassette, cassette_file) {
        Ok(g) => g,
        Err(UsageError(e)) => {
            eprintln!("error: {e:#}");
            return Ok(ExitCode::from(2));
        }
    };
    let csv_path = csv.unwrap_or_else(|| config.paths.csv.clone());
    match psa_core::pipeline::rescore(&gateway, &config, run_dir, &csv_path) {
        Ok(records) => {
            for record in &records {
                println!(
                    "{} {} OS={:.3} (rewritten)",
                    record.question_id, record.version, record.overall_score
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            eprintln!("error: {e}");
            Ok(ExitCode::from(1))
        }
    }
}

fn cmd_report(csv: &Path, version: Option<&str>, json: bool) -> Result<ExitCode, anyhow::Error> {
    if !csv.is_file() {
        eprintln!("error: csv not found: {}", csv.display());
        return Ok(ExitCode::from(2));
    }
    let version_filter = match version {
        None => None,
        Some(v) => match Version::parse(v) {
            Some(v) => Some(v),
            None => {
                eprintln!("error: unknown version '{v}' (expected v1 or v2)");
                return Ok(ExitCode::from(2));
            }
        },
    };
    let stats = reporting::category_stats(csv, version_filter)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&stats)?);
    } else {
        print!("{}", reporting::format_stats_table(&stats));
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Index {
            docs_dir,
            out,
            chunk_size,
            overlap,
        } => cmd_index(docs_dir, out, *chunk_size, *overlap),
        Command::Generate {
            question_file,
            category,
            id,
            out,
            csv,
            cassette,
            cassette_file,
            skip_refine,
            rag_index,
            config,
        } => cmd_generate(
            question_file,
            category,
            id.clone(),
            out.clone(),
            csv.clone(),
            cassette,
            cassette_file.as_deref(),
            *skip_refine,
            rag_index.as_deref(),
            config.as_deref(),
        ),
        Command::Evaluate {
            run_dir,
            csv,
            cassette,
            cassette_file,
            config,
        } => cmd_evaluate(
            run_dir,
            csv.clone(),
            cassette,
            cassette_file.as_deref(),
            config.as_deref(),
        ),
        Command::Report { csv, version, json } => cmd_report(csv, version.as_deref(), *json),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
