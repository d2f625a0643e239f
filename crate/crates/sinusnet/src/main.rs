//! Command-line entry point.
//!
//! Every subcommand reads one TOML experiment config, folds the optional
//! `--seed` override into it, and drives the library pipeline. Exit codes:
//! 0 on success, 1 when a stage fails, 2 for configuration or usage errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sinusnet::config::{load_config, validate_config, ExperimentConfig};
use sinusnet::eval::SweepStatus;
use sinusnet::metrics::MetricsReport;
use sinusnet::pipeline::{
    run_dir, run_pipeline, run_single_stage, run_sweep, RunSummary, Stage, SweepKind,
};
use sinusnet::ssl::PretrainTask;
use sinusnet::{Error, Result};

#[derive(Parser)]
#[command(name = "sinusnet", version, about = "Self-supervised pretraining pipeline for 3D sinus anomaly classification")]
struct Cli {
    /// Experiment config file (TOML).
    #[arg(long, global = true, default_value = "config.toml")]
    config: PathBuf,

    /// Override the config's global seed before stage seeds are derived.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run all stages in order, resuming from artifacts already on disk.
    Run {
        /// Stop after this stage: gen-data, split, train-cae, gen-residuals,
        /// pretrain, finetune, or evaluate.
        #[arg(long)]
        stage: Option<String>,
    },
    /// Generate the synthetic phantom dataset.
    GenData,
    /// Build the patient-level cross-validation split plan.
    Split,
    /// Train the anomaly-detection autoencoder on normal volumes.
    TrainCae,
    /// Compute post-processed reconstruction residuals for the training pool.
    GenResiduals,
    /// Pretrain encoders on residual reconstruction, plain AE, or DAE tasks.
    Pretrain {
        /// Override the configured pretraining task: residual, ae, or dae.
        #[arg(long)]
        task: Option<String>,
    },
    /// Fine-tune the classifier on the labelled fraction of each fold.
    Finetune,
    /// Score every fold's test set and aggregate metrics.
    Evaluate,
    /// Run an experiment sweep over label or autoencoder-data fractions.
    Sweep {
        /// Sweep kind: label (label-fraction) or cae (autoencoder-data).
        #[arg(long, default_value = "label")]
        kind: String,
    },
    /// Check the config against every rule; print one diagnostic per line.
    Validate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Argument(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

/// Load the config and apply CLI overrides; all stage seeds are derived here
/// so the frozen copy beside the artifacts records what actually ran.
fn resolved_config(cli: &Cli, task: Option<&str>) -> Result<ExperimentConfig> {
    let mut cfg = load_config(&cli.config)?;
    if let Some(name) = task {
        cfg.pretrain.task = PretrainTask::from_name(name).ok_or_else(|| {
            Error::Argument(format!("unknown pretraining task '{name}' (expected residual, ae, or dae)"))
        })?;
    }
    Ok(cfg.resolve(cli.seed))
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    match &cli.cmd {
        Cmd::Run { stage } => {
            let cfg = resolved_config(cli, None)?;
            let upto = stage.as_deref().map(Stage::parse).transpose()?;
            let summary = run_pipeline(&cfg, upto)?;
            print_summary(&summary);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::GenData => run_stage(cli, Stage::GenData, None),
        Cmd::Split => run_stage(cli, Stage::Split, None),
        Cmd::TrainCae => run_stage(cli, Stage::TrainCae, None),
        Cmd::GenResiduals => run_stage(cli, Stage::GenResiduals, None),
        Cmd::Pretrain { task } => run_stage(cli, Stage::Pretrain, task.as_deref()),
        Cmd::Finetune => run_stage(cli, Stage::Finetune, None),
        Cmd::Evaluate => run_stage(cli, Stage::Evaluate, None),
        Cmd::Sweep { kind } => {
            let cfg = resolved_config(cli, None)?;
            let kind = SweepKind::parse(kind)?;
            let rows = run_sweep(&cfg, kind)?;
            for row in &rows {
                match (&row.status, &row.report) {
                    (SweepStatus::Ok, Some(r)) => println!(
                        "{} @ {:>3}%: auroc {:.4}, auprc {:.4}, f1 {:.4}",
                        row.method, row.fraction, r.auroc.mean, r.auprc.mean, r.f1.mean
                    ),
                    _ => println!(
                        "{} @ {:>3}%: skipped (missing checkpoint)",
                        row.method, row.fraction
                    ),
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Validate => {
            let cfg = resolved_config(cli, None)?;
            let diagnostics = validate_config(&cfg);
            if diagnostics.is_empty() {
                println!("config ok (digest {}, run dir {})", cfg.digest(), run_dir(&cfg).display());
                Ok(ExitCode::SUCCESS)
            } else {
                for d in &diagnostics {
                    println!("{d}");
                }
                Ok(ExitCode::from(2))
            }
        }
    }
}

fn run_stage(cli: &Cli, stage: Stage, task: Option<&str>) -> Result<ExitCode> {
    let cfg = resolved_config(cli, task)?;
    let summary = run_single_stage(&cfg, stage)?;
    print_summary(&summary);
    Ok(ExitCode::SUCCESS)
}

fn print_summary(summary: &RunSummary) {
    if !summary.executed.is_empty() {
        println!("executed: {}", summary.executed.join(", "));
    }
    if !summary.skipped.is_empty() {
        println!("skipped (already done): {}", summary.skipped.join(", "));
    }
    println!("artifacts: {}", summary.run_dir.display());
    if let Some(report) = &summary.report {
        print_report(report);
    }
}

fn print_report(report: &MetricsReport) {
    for (name, m) in [("auroc", &report.auroc), ("auprc", &report.auprc), ("f1", &report.f1)] {
        println!(
            "{name}: mean {:.4} (95% ci {:.4}..{:.4}, {} folds)",
            m.mean, m.ci95_low, m.ci95_high, m.n_folds
        );
    }
}
