use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use opsd_core::context::ContextKind;
use opsd_core::model::ModelSize;
use opsd_core::{Error, Result};
use opsd_harness::pipeline::{self, Lab};
use opsd_harness::ExperimentConfig;
use serde_json::json;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "opsd-lab", version, about = "Desk-scale on-policy self-distillation experiments")]
struct Cli {
    /// TOML experiment config; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: $OPSD_LAB_OUT, then ./opsd-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Restrict to one context construction.
    #[arg(long, global = true)]
    context: Option<ContextKind>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train and validation task files.
    GenData,
    /// Produce the warm-start checkpoint.
    Pretrain {
        #[arg(long)]
        size: Option<ModelSize>,
    },
    /// Measure the initial teacher-student gap.
    MeasureGap {
        #[arg(long)]
        size: Option<ModelSize>,
    },
    /// Run OPSD and append (gap, improvement) to the law CSV.
    Train {
        #[arg(long)]
        size: Option<ModelSize>,
    },
    /// Every context construction for every seed.
    Screen,
    /// Peer solution + feedback across model sizes.
    SweepSizes,
    /// Fit the law to a CSV and write the report and plot data.
    FitLaw {
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Evaluate the fitted law at a gap.
    Predict {
        #[arg(long)]
        gap: f64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Validation mean@4 of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(context) = cli.context {
        cfg.screen.contexts = vec![context];
    }
    let seed = cfg.seeds[0];
    let need_context = || {
        cli.context
            .ok_or_else(|| Error::Contract("this subcommand needs --context".into()))
    };
    let lab = Lab::open(&pipeline::output_root(cli.out.clone()), cfg)?;
    let size_or = |s: Option<ModelSize>| s.unwrap_or(lab.config().model.size);

    match cli.command {
        Command::GenData => {
            let (train, val) = lab.gen_data()?;
            emit(json!({ "train": train.len(), "val": val.len() }));
        }
        Command::Pretrain { size } => {
            let size = size_or(size);
            lab.pretrain(size)?;
            emit(json!({ "checkpoint": lab.warm_path(size) }));
        }
        Command::MeasureGap { size } => {
            let record = lab.measure_gap(need_context()?, size_or(size), seed)?;
            emit(serde_json::to_value(record).expect("serializes"));
        }
        Command::Train { size } => {
            let outcome = lab.train(need_context()?, size_or(size), seed)?;
            emit(serde_json::to_value(outcome.record).expect("serializes"));
        }
        Command::Screen => {
            for outcome in lab.screen()? {
                emit(serde_json::to_value(outcome.record).expect("serializes"));
            }
        }
        Command::SweepSizes => {
            for outcome in lab.sweep_sizes()? {
                emit(serde_json::to_value(outcome.record).expect("serializes"));
            }
        }
        Command::FitLaw { csv } => {
            let report = lab.fit_law(csv.as_deref())?;
            emit(serde_json::to_value(report.fit).expect("serializes"));
        }
        Command::Predict { gap, report } => {
            let y = lab.predict(gap, report.as_deref())?;
            emit(json!({ "gap": gap, "predicted_improvement": y }));
        }
        Command::Eval { checkpoint } => {
            let acc = lab.eval(&checkpoint, seed)?;
            emit(json!({ "checkpoint": checkpoint, "mean_at_4": acc }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let root = pipeline::output_root(cli.out.clone());
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} msg={:?}", e.kind(), e.to_string());
            for p in pipeline::partial_files(&root) {
                eprintln!("partial: {}", p.display());
            }
            ExitCode::FAILURE
        }
    }
}
