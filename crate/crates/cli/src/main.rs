//! Command-line driver: train, sample, eval, and check over a synthetic
//! coupled audio-video dataset.
//!
//! Exit codes: 0 success, 1 usage error, 2 config error, 3 numerical
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use triflow::config::ExperimentConfig;
use triflow::error::Error;
use triflow::pipeline::{self, format_sig};

#[derive(Parser)]
#[command(name = "triflow", version, about = "Tri-modal flow-matching transformer at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration file (flat `key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a loss log.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Override the config's step count.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Generate latent clips from a checkpoint.
    Sample {
        #[command(flatten)]
        common: CommonArgs,
        /// Override the guidance scale.
        #[arg(long = "cfg-scale")]
        cfg_scale: Option<f64>,
    },
    /// Score generated clips against a held-out synthetic set.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the property suite; nonzero exit on any failure.
    Check {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::from_file(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.display().to_string();
    }
    Ok(cfg)
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::NonFinite { .. } | Error::SamplerDiverged { .. } => 3,
        _ => 2,
    }
}

fn run() -> Result<(), (u8, String)> {
    let cli = Cli::try_parse().map_err(|e| (1u8, e.to_string()))?;
    let result: Result<(), Error> = match &cli.command {
        Command::Train { common, steps } => (|| {
            let mut cfg = load_config(common)?;
            if let Some(s) = steps {
                cfg.trainer.steps = *s;
            }
            let report = pipeline::run_train(&cfg)?;
            if let (Some(first), Some(last)) = (report.losses.first(), report.losses.last()) {
                println!(
                    "trained {} steps: loss {} -> {}",
                    report.losses.len(),
                    format_sig(*first),
                    format_sig(*last)
                );
            }
            println!("checkpoint: {}", report.checkpoint.display());
            Ok(())
        })(),
        Command::Sample { common, cfg_scale } => (|| {
            let mut cfg = load_config(common)?;
            if let Some(scale) = cfg_scale {
                cfg.sampler.guidance = *scale;
            }
            let report = pipeline::run_sample(&cfg)?;
            for f in &report.files {
                println!("wrote {}", f.display());
            }
            Ok(())
        })(),
        Command::Eval { common } => (|| {
            let cfg = load_config(common)?;
            let metrics = pipeline::run_eval(&cfg)?;
            for (k, v) in &metrics {
                println!("{k}={}", format_sig(*v));
            }
            Ok(())
        })(),
        Command::Check { common } => {
            let cfg = load_config(common).map_err(|e| (exit_code_for(&e), e.to_string()))?;
            let _ = cfg;
            let (lines, all_ok) = pipeline::run_check();
            for line in &lines {
                println!("{line}");
            }
            if all_ok {
                return Ok(());
            }
            return Err((3, "property suite failed".to_string()));
        }
    };
    result.map_err(|e| (exit_code_for(&e), e.to_string()))
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("{msg}");
            ExitCode::from(code)
        }
    }
}
