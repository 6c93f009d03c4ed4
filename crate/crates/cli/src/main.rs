//! `batclip` — benchmark harness for bimodal test-time adaptation.
//!
//! Exit codes: 0 success, 1 usage/config, 2 numerical failure, 3 I/O.

use batclip_cli::config::ExperimentConfig;
use batclip_cli::{cmd_adapt, cmd_corrupt, cmd_gradcheck, cmd_pretrain, cmd_zeroshot};
use batclip_core::error::Error;
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "batclip", version, about = "Bimodal test-time adaptation benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config JSON (defaults apply when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model checkpoint (.btc)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory (created if missing)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override every seed in the config
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Contrastively pretrain the dual encoder on clean shapes data
    Pretrain(CommonArgs),
    /// Cache corrupted datasets as named-tensor archives
    Corrupt(CommonArgs),
    /// Zero-shot accuracy across corruptions and severities
    Zeroshot(CommonArgs),
    /// The full adaptation benchmark sweep
    Adapt(CommonArgs),
    /// Finite-difference audit of every gradient path
    Gradcheck {
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig, Error> {
    let cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    Ok(cfg.with_seed_override(args.seed))
}

fn out_dir<'a>(args: &'a CommonArgs, cfg: &'a ExperimentConfig, fallback: &'a str) -> PathBuf {
    args.out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn require_checkpoint(args: &CommonArgs) -> Result<&Path, Error> {
    args.checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("--checkpoint is required for this command".into()))
}

fn run(cli: Cli) -> Result<i32, Error> {
    match cli.cmd {
        Cmd::Pretrain(args) => {
            let cfg = load_config(&args)?;
            let out = out_dir(&args, &cfg, "runs/pretrain");
            let outcome = cmd_pretrain(&cfg, &out)?;
            println!(
                "checkpoint: {}   holdout zero-shot: {:.2}%   tau: {:.4}",
                outcome.checkpoint_path.display(),
                outcome.holdout_accuracy,
                outcome.tau
            );
            Ok(0)
        }
        Cmd::Corrupt(args) => {
            let cfg = load_config(&args)?;
            let out = out_dir(&args, &cfg, "runs/corrupt");
            let rows = cmd_corrupt(&cfg, &out)?;
            println!("wrote {} archives to {}", rows.len(), out.display());
            Ok(0)
        }
        Cmd::Zeroshot(args) => {
            let cfg = load_config(&args)?;
            let checkpoint = require_checkpoint(&args)?;
            let out = out_dir(&args, &cfg, "runs/zeroshot");
            let rows = cmd_zeroshot(&cfg, checkpoint, &out)?;
            for r in &rows {
                println!("{:16} s{}  {:6.2}%  (n={})", r.corruption, r.severity, r.accuracy, r.n);
            }
            Ok(0)
        }
        Cmd::Adapt(args) => {
            let cfg = load_config(&args)?;
            let checkpoint = require_checkpoint(&args)?;
            let out = out_dir(&args, &cfg, "runs/adapt");
            let table = cmd_adapt(&cfg, checkpoint, &out)?;
            for mean in table.method_means() {
                println!(
                    "{:24} mean {:6.2}%  gain {:+6.2}  ({} cells)",
                    mean.method, mean.mean_accuracy, mean.mean_gain, mean.cells
                );
            }
            if table.any_failed() {
                eprintln!("some cells failed; see benchmark.csv");
                Ok(2)
            } else {
                Ok(0)
            }
        }
        Cmd::Gradcheck { width, seed, out, .. } => {
            let report = cmd_gradcheck(width, seed.unwrap_or(0), out.as_deref())?;
            for c in &report.checks {
                println!(
                    "{}  {:20} max rel err {:.3e}",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.max_rel_err
                );
            }
            println!("overall max rel err {:.3e}", report.max_rel_err);
            Ok(if report.all_pass { 0 } else { 2 })
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) | Error::Parse(_) => 3,
        e if e.is_numerical() => 2,
        _ => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code(&err));
        }
    }
}
