//! `icxlt`: command-line front end for the experiment harness.
//!
//! Precedence everywhere: command-line flags, then the experiment spec or config
//! file, then built-in defaults.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use icxlt_core::transfer::KSrc;
use icxlt_core::{Error, ErrorCategory};

#[derive(Parser, Debug)]
#[command(name = "icxlt", version, about = "In-context cross-lingual transfer experiments")]
struct Cli {
    /// Print a machine-readable JSON summary (or error) on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// More log output (-v info, -vv debug). RUST_LOG also works.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic language family.
    Synth(SynthArgs),
    /// Train a toy model on the source language.
    Train(TrainArgs),
    /// Fine-tune a trained model on target-language shots.
    Adapt(AdaptArgs),
    /// Evaluate a trained model (or a remote backend) without training.
    Eval(EvalArgs),
    /// Run a full experiment spec.
    Run(RunArgs),
    /// Compute score tables, transfer gaps, improvements and correlations.
    Report(ReportArgs),
    /// Check a dataset manifest or an experiment spec.
    Validate(ValidateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory for the manifest, JSONL splits and mapping.json.
    #[arg(long)]
    out: PathBuf,
    /// Generator config (JSON); flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "synthlang")]
    experiment_id: String,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long)]
    dev_size: Option<usize>,
}

/// Training hyperparameter overrides.
#[derive(Args, Debug, Default, Clone)]
struct TrainFlags {
    /// Full training config (JSON); the flags below override its fields.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    /// Per-word relexicalization probability during training.
    #[arg(long)]
    relexicalize: Option<f64>,
    #[arg(long)]
    alias_bank: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum RegimeArg {
    Ict,
    Pft,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    regime: RegimeArg,
    /// Demonstrations per training instance (ict only).
    #[arg(long, default_value_t = 10)]
    m: usize,
    /// Source shots per class, or "full".
    #[arg(long, default_value = "full")]
    k_src: KSrc,
    #[arg(long, default_value = "icxlt")]
    experiment_id: String,
    /// Fine-tuning seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the source K-shot draw.
    #[arg(long, default_value_t = 0)]
    shot_src_seed: u64,
    #[command(flatten)]
    train: TrainFlags,
    /// Keep the epoch with the best source dev F1.
    #[arg(long)]
    dev_selection: bool,
    #[arg(long)]
    allow_context_reuse: bool,
    /// Model directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum AdaptModeArg {
    Grad,
    Macro,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    /// Directory written by `icxlt train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    lang: String,
    #[arg(long, value_enum, default_value = "grad")]
    mode: AdaptModeArg,
    #[arg(long, default_value_t = 1)]
    k_tgt: usize,
    /// Source weight in the macro objective.
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    shot_seed: u64,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum EvalModeArg {
    Zero,
    Ic,
    IcSrc,
    #[value(name = "raw-1s")]
    Raw1s,
}

/// Remote backend options shared by `eval` and `run`.
#[derive(Args, Debug, Default, Clone)]
struct BackendFlags {
    /// Use the remote backend at this URL (ICXLT_BACKEND_URL also overrides).
    #[arg(long)]
    backend_url: Option<String>,
    /// Remote backend config (JSON).
    #[arg(long)]
    backend_config: Option<PathBuf>,
    /// Parallel runs or requests (defaults to ICXLT_WORKERS).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory written by `icxlt train` or `icxlt adapt`; omit for a remote backend.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset manifest; defaults to the one the model was trained on.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: EvalModeArg,
    /// Languages besides the source (comma-separated); all when absent.
    #[arg(long, value_delimiter = ',')]
    langs: Option<Vec<String>>,
    #[arg(long)]
    k_tgt: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    shot_seeds: Vec<u64>,
    /// Regime recorded for remote evaluation (ic modes need ict).
    #[arg(long, value_enum, default_value = "ict")]
    regime: RegimeArg,
    #[arg(long, default_value_t = 10)]
    m: usize,
    #[arg(long)]
    experiment_id: Option<String>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    failure_threshold: Option<f64>,
    #[command(flatten)]
    backend: BackendFlags,
    #[arg(long, default_value = "results.json")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    experiment_id: Option<String>,
    #[arg(long)]
    k_src: Option<KSrc>,
    /// Context size of the ict regime.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    k_tgt: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    finetune_seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    shot_src_seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    shot_tgt_seeds: Option<Vec<u64>>,
    /// Languages besides the source (comma-separated).
    #[arg(long, value_delimiter = ',')]
    langs: Option<Vec<String>>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Continue a partial results file written by the same spec.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    backend: BackendFlags,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Results files written by `run` or `eval`.
    #[arg(long, num_args = 1.., required = true)]
    results: Vec<PathBuf>,
    /// Covariate CSV (`lang,value`), optionally as NAME=PATH. Repeatable.
    #[arg(long)]
    covariate: Vec<String>,
    /// Compute ratios per run, then average.
    #[arg(long)]
    per_run: bool,
    #[arg(long, default_value_t = icxlt_core::metrics::DEFAULT_PERMUTATIONS)]
    permutations: usize,
    /// Seed of the permutation-test key.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = true)]
struct ValidateArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    spec: Option<PathBuf>,
}

/// Misuse detected after parsing (conflicting or missing options).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// The error chain, skipping causes already spelled out by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>().map(Error::category) {
        Some(ErrorCategory::Backend) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let json = cli.json;
    match commands::dispatch(cli.command) {
        Ok(summary) => {
            if json {
                println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            } else if let Some(text) = summary.get("message").and_then(|m| m.as_str()) {
                println!("{text}");
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            let code = exit_code(&err);
            let text = describe(&err);
            eprintln!("error: {text}");
            if json {
                let body = serde_json::json!({
                    "ok": false,
                    "error": text,
                    "exit_code": code,
                });
                println!("{}", serde_json::to_string_pretty(&body).expect("error serializes"));
            }
            ExitCode::from(code)
        }
    }
}
