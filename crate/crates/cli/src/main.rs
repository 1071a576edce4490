//! `prefmem` command-line interface. Results go to stdout as JSON (CSV for
//! `ablate`); logs go to stderr.

mod commands;
mod config;
mod error;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use prefmem::chunk::DEFAULT_CHUNK_WORDS;
use tracing_subscriber::EnvFilter;

use config::{GlobalArgs, RunConfig};
use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "prefmem",
    version,
    about = "Preference-aligned retrieval memory"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    /// Log progress to stderr (repeat for more detail)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter, verify and index a chunks JSONL file into the store
    Index { chunks: PathBuf },
    /// Retrieve the top-k entries for a query
    Query { text: String },
    /// Replay a streaming scenario with preference drift
    Stream {
        scenario: PathBuf,
        /// Also write the checkpoint series as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Include wall-clock stage latencies in the output
        #[arg(long)]
        timings: bool,
    },
    /// Run an ablation sweep and print one CSV row per configuration
    Ablate { sweep: PathBuf },
    /// Entry count, per-preference histogram and footprint of the store
    Stats,
    /// Split a plain-text document into chunks JSONL
    Chunk {
        input: PathBuf,
        #[arg(long)]
        doc_id: Option<String>,
        #[arg(long, default_value_t = DEFAULT_CHUNK_WORDS)]
        max_words: usize,
    },
    /// Generate synthetic inputs with known relevance
    #[command(subcommand)]
    Synth(Synth),
}

#[derive(Debug, Subcommand)]
enum Synth {
    /// Write chunks.jsonl, profile.json and queries.jsonl into a directory
    Corpus {
        dir: PathBuf,
        #[arg(long, default_value_t = 1000)]
        chunks: usize,
        #[arg(long, default_value_t = 5)]
        preferences: usize,
    },
    /// Write a scenario JSON file with random drift
    Scenario {
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        batches: usize,
        #[arg(long, default_value_t = 40)]
        batch_size: usize,
    },
}

fn print_json(value: &serde_json::Value) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&cli.global)?;
    tracing::debug!(?cfg, "resolved configuration");
    match cli.command {
        Command::Index { chunks } => print_json(&commands::index(&cfg, &chunks)?),
        Command::Query { text } => print_json(&commands::query(&cfg, &text)?),
        Command::Stream {
            scenario,
            csv,
            timings,
        } => print_json(&commands::stream(&cfg, &scenario, csv.as_deref(), timings)?),
        Command::Ablate { sweep } => {
            print!("{}", commands::ablate(&cfg, &sweep)?);
            Ok(())
        }
        Command::Stats => print_json(&commands::stats(&cfg)?),
        Command::Chunk {
            input,
            doc_id,
            max_words,
        } => {
            let n = commands::chunk(
                &input,
                doc_id.as_deref(),
                max_words,
                &mut std::io::stdout().lock(),
            )?;
            tracing::info!(chunks = n, "document split");
            Ok(())
        }
        Command::Synth(Synth::Corpus {
            dir,
            chunks,
            preferences,
        }) => print_json(&commands::synth_corpus(&cfg, &dir, chunks, preferences)?),
        Command::Synth(Synth::Scenario {
            out,
            batches,
            batch_size,
        }) => print_json(&commands::synth_scenario(&cfg, &out, batches, batch_size)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();

    let started = Instant::now();
    match run(cli) {
        Ok(()) => {
            tracing::info!(ms = commands::elapsed_ms(started), "done");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("prefmem: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
