//! Command-line front end. Each subcommand reads one TOML config, writes
//! its artifacts plus the resolved config into `--out-dir`.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::{Context as _, Result};
use clap::{Parser, Subcommand};

pub use config::RunConfig;

use crate::{Error, Execution};

pub const THREADS_ENV: &str = "VERITAS_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "veritas",
    version,
    about = "Head probing, confidence prediction and guided decoding"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, clap::Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Worker threads; 1 runs sequentially. VERITAS_THREADS takes precedence.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Also write SVG plots.
    #[arg(long, global = true)]
    pub plot: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Fit a probe per head; writes heatmap.csv and probes.json.
    Probe,
    /// Rank heads by probe accuracy; writes selection.json.
    SelectHeads,
    /// Train the confidence predictor; writes predictor.json.
    TrainPredictor,
    /// Score the predictor on the test split; writes calibration_report.json.
    EvalCalibration,
    /// Run decoding strategies on a benchmark; writes results.csv and summary tables.
    Decode,
    /// Render an accuracy heatmap.
    Heatmap,
    /// Per-head probe difference between two answers.
    AnswerDiff,
    /// Parse and split a dataset; writes split_manifest.json.
    DatasetValidate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Probe => "probe",
            Command::SelectHeads => "select-heads",
            Command::TrainPredictor => "train-predictor",
            Command::EvalCalibration => "eval-calibration",
            Command::Decode => "decode",
            Command::Heatmap => "heatmap",
            Command::AnswerDiff => "answer-diff",
            Command::DatasetValidate => "dataset-validate",
        }
    }
}

fn resolve_threads(flag: Option<usize>) -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n = v.trim().parse::<usize>().map_err(|_| {
                Error::config(format!(
                    "{THREADS_ENV} must be a positive integer, got {v:?}"
                ))
            })?;
            Ok(Some(n))
        }
        Err(_) => Ok(flag),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let args = cli.common;
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let exec = match resolve_threads(args.threads)? {
        Some(0) => return Err(Error::config("thread count must be at least 1").into()),
        Some(1) => Execution::Sequential,
        Some(n) => {
            crate::exec::init_threads(n);
            Execution::Parallel
        }
        None => Execution::Parallel,
    };
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| Error::io(args.out_dir.display().to_string(), e))?;
    let resolved = args.out_dir.join("config.toml");
    std::fs::write(&resolved, cfg.to_toml()?)
        .map_err(|e| Error::io(resolved.display().to_string(), e))?;
    let ctx = commands::Ctx {
        cfg,
        out_dir: args.out_dir,
        exec,
        plot: args.plot,
    };
    let cmd = cli.command;
    match cmd {
        Command::Probe => commands::probe(&ctx),
        Command::SelectHeads => commands::select_heads(&ctx),
        Command::TrainPredictor => commands::train(&ctx),
        Command::EvalCalibration => commands::eval_calibration(&ctx),
        Command::Decode => commands::decode(&ctx),
        Command::Heatmap => commands::heatmap(&ctx),
        Command::AnswerDiff => commands::answer_diff(&ctx),
        Command::DatasetValidate => commands::dataset_validate(&ctx),
    }
    .with_context(|| format!("{} failed", cmd.name()))
}

/// Machine-readable error line and process exit code (2 for bad inputs).
pub fn report(err: &anyhow::Error) -> (String, i32) {
    let lib = err.chain().find_map(|e| e.downcast_ref::<Error>());
    let (kind, code) = match lib {
        Some(e) => (e.kind(), if e.is_validation() { 2 } else { 1 }),
        None => ("runtime", 1),
    };
    // library errors already print their own sources, so stop the chain there
    let mut parts = Vec::new();
    for e in err.chain() {
        parts.push(e.to_string());
        if e.downcast_ref::<Error>().is_some() {
            break;
        }
    }
    let body = serde_json::json!({ "error": { "kind": kind, "message": parts.join(": ") } });
    (body.to_string(), code)
}
