//! Command-line front end: dataset generation, staged training, evaluation
//! and the confidence report.
//!
//! Exit codes: 0 on success, 2 for configuration or validation problems,
//! 3 when a required earlier-stage artifact is missing, 1 otherwise.

use actdet_core::config::RunConfig;
use actdet_core::dataset::synth::SyntheticSpec;
use actdet_core::error::Error;
use actdet_core::pipeline::{self, Stage};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "actdet", version, about = "Anchor-context action detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a generator spec (JSON).
    GenData {
        /// Path to the generator spec file.
        spec: PathBuf,
        /// Output dataset directory. Defaults to `<spec stem>_dataset`
        /// next to the spec file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one stage. The diffusion stage requires a detector checkpoint.
    Train {
        /// Path to the run configuration (key=value lines).
        config: PathBuf,
        #[arg(long, value_parser = ["acd", "ccd"])]
        stage: String,
        /// Additional --key=value overrides of configuration entries.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Evaluate a prediction source on the test split.
    Eval {
        config: PathBuf,
        #[arg(long, value_parser = ["acd", "ccd"])]
        source: String,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Emit the per-class confidence report for the diffusion predictions.
    ReportConfidence {
        config: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Validation(_) | Error::Parse { .. } | Error::Contract(_) => 2,
        Error::MissingDependency(_) => 3,
        _ => 1,
    }
}

fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>, Error> {
    tokens
        .iter()
        .map(|tok| {
            let stripped = tok.strip_prefix("--").unwrap_or(tok);
            stripped
                .split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| {
                    Error::Config(format!("override '{tok}' is not of the form --key=value"))
                })
        })
        .collect()
}

fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig, Error> {
    let mut config = RunConfig::from_file(path)?;
    config.apply_overrides(&parse_overrides(overrides)?)?;
    Ok(config)
}

fn run() -> Result<(), Error> {
    match Cli::parse().command {
        Command::GenData { spec, out } => {
            let text = std::fs::read_to_string(&spec)?;
            let parsed: SyntheticSpec = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: spec.display().to_string(),
                line: e.line(),
                message: e.to_string(),
            })?;
            let out_dir = out.unwrap_or_else(|| {
                let stem = spec
                    .file_stem()
                    .map(|s| s.to_string_lossy().to_string())
                    .unwrap_or_else(|| "spec".to_string());
                spec.with_file_name(format!("{stem}_dataset"))
            });
            pipeline::generate_dataset(&parsed, &out_dir)?;
            println!("dataset written to {}", out_dir.display());
            Ok(())
        }
        Command::Train {
            config,
            stage,
            overrides,
        } => {
            let config = load_config(&config, &overrides)?;
            let stage = Stage::parse(&stage)?;
            let out_dir = pipeline::train_stage(&config, stage)?;
            println!("checkpoint written to {}", out_dir.display());
            Ok(())
        }
        Command::Eval {
            config,
            source,
            overrides,
        } => {
            let config = load_config(&config, &overrides)?;
            let source = Stage::parse(&source)?;
            let outcome = pipeline::eval_stage(&config, source)?;
            println!(
                "mAP10={} mAP30={} mAP50={} mAPmean={}",
                outcome.suite.map10, outcome.suite.map30, outcome.suite.map50, outcome.suite.map_mean
            );
            Ok(())
        }
        Command::ReportConfidence { config, overrides } => {
            let config = load_config(&config, &overrides)?;
            let _ = pipeline::eval_stage(&config, Stage::Ccd)?;
            let out_dir = config.resolved_out_dir();
            let report = std::fs::read_to_string(out_dir.join(pipeline::CCD_CONFIDENCE))?;
            print!("{report}");
            Ok(())
        }
    }
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
