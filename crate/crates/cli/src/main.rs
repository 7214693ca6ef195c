//! `margingate`: reproduce batch-shape token nondeterminism on a desk-scale
//! simulator and measure the policies that remove it.
//!
//! Every command reads the run configuration (built-in tuned default, or
//! `--config <file>` overriding individual keys), operates inside `--out`,
//! and writes CSV tables plus a JSON manifest. Exit codes: 0 success, 2
//! invalid configuration or usage, 3 capacity/corpus/I-O errors, 4 internal
//! invariant violations.

use clap::{Parser, Subcommand};
use margingate::config::RunConfig;
use margingate::manifest::Manifest;
use margingate::pipeline;
use margingate::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "margingate", version, about, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Run configuration file; omitted keys keep the shipped tuned defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory for the corpus, CSV tables, and manifests.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads (0 = one per core). Changes speed, never bytes.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    /// Overrides the corpus seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the seeded prompt corpus to the output directory
    GenCorpus,
    /// Flip rates, divergence-aligned cache deviation, logit geometry,
    /// margin recall
    Diagnose,
    /// Oracle single-column repair across the corpus
    Oracle,
    /// Margin-gated selective verification at the configured threshold
    Gate,
    /// Measure logit perturbation magnitudes and the doubled threshold
    Calibrate,
    /// Sweep thresholds to the smallest fully deterministic one
    Sweep,
    /// Re-measure the gate at the swept threshold on held-out corpora
    Transfer,
    /// Run the full pipeline and write a plain-text digest
    Report,
}

fn run(cli: &Cli) -> margingate::Result<Manifest> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.corpus.seed = seed;
    }
    match cli.command {
        Cmd::GenCorpus => pipeline::cmd_gen_corpus(&cfg, &cli.out),
        Cmd::Diagnose => pipeline::cmd_diagnose(&cfg, &cli.out, cli.workers),
        Cmd::Oracle => pipeline::cmd_oracle(&cfg, &cli.out, cli.workers),
        Cmd::Gate => pipeline::cmd_gate(&cfg, &cli.out, cli.workers),
        Cmd::Calibrate => pipeline::cmd_calibrate(&cfg, &cli.out, cli.workers),
        Cmd::Sweep => pipeline::cmd_sweep(&cfg, &cli.out, cli.workers),
        Cmd::Transfer => pipeline::cmd_transfer(&cfg, &cli.out, cli.workers),
        Cmd::Report => pipeline::cmd_report(&cfg, &cli.out, cli.workers),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Capacity(_) | Error::Io { .. } => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(manifest) => {
            if let Some(w) = manifest.summary.get("warning") {
                eprintln!("warning: {w}");
            }
            for (key, value) in &manifest.summary {
                if key != "warning" {
                    println!("{key} = {value}");
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
