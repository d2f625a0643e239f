//! Stage orchestration: chains data generation, splitting, autoencoder
//! training, residual generation, pretraining, fine-tuning, and evaluation
//! into one resumable run.
//!
//! Every run lives in `output_root/run-<digest>/`, where the digest is the
//! hash of the resolved config, so identical configs share artifacts and
//! different configs never collide. Each stage owns a directory and drops
//! a `.done` marker when it finishes; rerunning skips marked stages, which
//! makes a finished pipeline a no-op. The generated dataset is addressed
//! by the hash of the `[phantom]` section alone and lives under
//! `data_root`, shared across runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{validate_config, ExperimentConfig};
use crate::data::{select_by_ids, UnlabelledVolume};
use crate::error::{Error, Result};
use crate::eval::{
    classifier_from_checkpoint, evaluate, finetune, run_cae_fraction_sweep,
    run_label_fraction_sweep, CaeSweepInputs, SweepMethod, SweepRow,
};
use crate::metrics::MetricsReport;
use crate::models::{load_checkpoint, save_checkpoint};
use crate::phantom::{generate_dataset, load_dataset, read_manifest, write_dataset, Sample};
use crate::seeding::derive2;
use crate::splits::{load_split, make_split, save_split, SampleMeta, SplitPlan};
use crate::ssl::{pretrain_ae, pretrain_dae, pretrain_residual, PretrainTask};
use crate::uad::{
    cae_from_checkpoint, load_residuals, sweep_unlabelled, train_cae, write_curve_csv,
};

const DONE_MARKER: &str = ".done";
const SALT_FOLD_CAE: u64 = 0xF0_7D_01;
const SALT_FOLD_FINETUNE: u64 = 0xF0_7D_02;
const SALT_TASK_RESIDUAL: u64 = 0xF0_7D_11;
const SALT_TASK_AE: u64 = 0xF0_7D_12;
const SALT_TASK_DAE: u64 = 0xF0_7D_13;

/// The seven pipeline stages, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GenData,
    Split,
    TrainCae,
    GenResiduals,
    Pretrain,
    Finetune,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenData,
        Stage::Split,
        Stage::TrainCae,
        Stage::GenResiduals,
        Stage::Pretrain,
        Stage::Finetune,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Split => "split",
            Stage::TrainCae => "train-cae",
            Stage::GenResiduals => "gen-residuals",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Stage::ALL.iter().map(|st| st.name()).collect();
                Error::Argument(format!("unknown stage '{s}' (one of: {})", names.join(", ")))
            })
    }
}

/// What a pipeline invocation did.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    /// Stages executed this invocation, in order.
    pub executed: Vec<&'static str>,
    /// Stages skipped because their marker was already present.
    pub skipped: Vec<&'static str>,
    /// The evaluation report, when the evaluate stage has completed.
    pub report: Option<MetricsReport>,
}

/// Digest of one config section, used to address shared artifacts.
fn section_digest<T: Serialize>(section: &T) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_string(section).expect("section serializes").as_bytes());
    hasher.finalize().iter().take(8).map(|b| format!("{:02x}", b)).collect()
}

/// Directory of the dataset this config generates.
pub fn dataset_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths.data_root.join(format!("dataset-{}", section_digest(&cfg.phantom)))
}

/// Directory of this config's run artifacts.
pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths.output_root.join(format!("run-{}", cfg.digest()))
}

fn stage_dir(cfg: &ExperimentConfig, stage: Stage) -> PathBuf {
    match stage {
        Stage::GenData => dataset_dir(cfg),
        _ => run_dir(cfg).join(stage.name()),
    }
}

fn is_done(dir: &Path) -> bool {
    dir.join(DONE_MARKER).exists()
}

/// Whether a stage has completed for this config.
pub fn stage_done(cfg: &ExperimentConfig, stage: Stage) -> bool {
    is_done(&stage_dir(cfg, stage))
}

fn mark_done(dir: &Path, summary: &str) -> Result<()> {
    let path = dir.join(DONE_MARKER);
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    fs::write(&path, format!("finished_unix: {stamp}\n{summary}\n"))
        .map_err(|e| Error::io(&path, e))
}

/// Per-stage states plus the first error, written beside the artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunStatus {
    pub config_digest: String,
    /// Stage name -> `done` / `failed` / `pending`.
    pub stages: BTreeMap<String, String>,
    pub error: Option<String>,
}

fn write_status(cfg: &ExperimentConfig, failed: Option<(Stage, &Error)>) -> Result<()> {
    let mut stages = BTreeMap::new();
    for stage in Stage::ALL {
        let state = if stage_done(cfg, stage) {
            "done"
        } else if failed.map(|(s, _)| s) == Some(stage) {
            "failed"
        } else {
            "pending"
        };
        stages.insert(stage.name().to_string(), state.to_string());
    }
    let status = RunStatus {
        config_digest: cfg.digest(),
        stages,
        error: failed.map(|(_, e)| e.to_string()),
    };
    let path = run_dir(cfg).join("status.json");
    let text = serde_json::to_string_pretty(&status).expect("status serializes");
    // Skip the write when nothing changed so a finished rerun leaves no trace.
    if fs::read_to_string(&path).ok().as_deref() == Some(text.as_str()) {
        return Ok(());
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Serialize)]
struct Provenance {
    config_digest: String,
    seed: u64,
    version: &'static str,
    created_unix: u64,
}

/// Validate the config, check the data root, and set up the run directory
/// with its frozen config and provenance record.
fn ensure_scaffold(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let diags = validate_config(cfg);
    if !diags.is_empty() {
        let lines: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
        return Err(Error::Config(lines.join("; ")));
    }
    if !cfg.paths.data_root.is_dir() {
        return Err(Error::Config(format!(
            "paths.data_root: directory {} does not exist",
            cfg.paths.data_root.display()
        )));
    }
    let dir = run_dir(cfg);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let frozen = dir.join("config.toml");
    let text = cfg.to_toml();
    match fs::read_to_string(&frozen) {
        Ok(existing) if existing == text => {}
        Ok(_) => {
            return Err(Error::State(format!(
                "{} holds a different config; refusing to mix artifacts",
                frozen.display()
            )))
        }
        Err(_) => fs::write(&frozen, &text).map_err(|e| Error::io(&frozen, e))?,
    }

    let prov_path = dir.join("provenance.json");
    if !prov_path.exists() {
        let prov = Provenance {
            config_digest: cfg.digest(),
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION"),
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let text = serde_json::to_string_pretty(&prov).expect("provenance serializes");
        fs::write(&prov_path, text).map_err(|e| Error::io(&prov_path, e))?;
    }
    Ok(dir)
}

fn manifest_path(cfg: &ExperimentConfig) -> PathBuf {
    dataset_dir(cfg).join("manifest.jsonl")
}

fn load_plan(cfg: &ExperimentConfig) -> Result<SplitPlan> {
    load_split(&stage_dir(cfg, Stage::Split).join("plan.json"))
}

fn fold_dir(base: &Path, fold: usize) -> PathBuf {
    base.join(format!("fold{fold}"))
}

/// Checkpoint path for one pretraining task on one fold.
pub fn pretrain_checkpoint_path(cfg: &ExperimentConfig, fold: usize, task: PretrainTask) -> PathBuf {
    fold_dir(&stage_dir(cfg, Stage::Pretrain), fold).join(format!("{}.ckpt", task.stage_tag()))
}

fn task_salt(task: PretrainTask) -> u64 {
    match task {
        PretrainTask::Residual => SALT_TASK_RESIDUAL,
        PretrainTask::Ae => SALT_TASK_AE,
        PretrainTask::Dae => SALT_TASK_DAE,
    }
}

/// Every pretraining task this config needs: the headline task plus any
/// extras the sweep roster references.
fn pretrain_tasks(cfg: &ExperimentConfig) -> Vec<PretrainTask> {
    let mut tasks = vec![cfg.pretrain.task];
    for name in &cfg.sweep.methods {
        if let Some(t) = PretrainTask::from_name(name) {
            if !tasks.contains(&t) {
                tasks.push(t);
            }
        }
    }
    tasks
}

fn normals_of(samples: &[Sample]) -> Vec<Sample> {
    samples.iter().filter(|s| !s.is_anomalous()).cloned().collect()
}

fn stage_gen_data(cfg: &ExperimentConfig) -> Result<String> {
    let samples = generate_dataset(&cfg.phantom)?;
    write_dataset(&dataset_dir(cfg), &samples)?;
    Ok(format!("samples: {}", samples.len()))
}

fn stage_split(cfg: &ExperimentConfig) -> Result<String> {
    let metas: Vec<SampleMeta> =
        read_manifest(&manifest_path(cfg))?.iter().map(SampleMeta::from).collect();
    let plan = make_split(&metas, &cfg.split)?;
    let dir = stage_dir(cfg, Stage::Split);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    save_split(&dir.join("plan.json"), &plan)?;
    Ok(format!("folds: {}", plan.folds.len()))
}

fn stage_train_cae(cfg: &ExperimentConfig) -> Result<String> {
    let plan = load_plan(cfg)?;
    let dataset = load_dataset(&manifest_path(cfg))?;
    let base = stage_dir(cfg, Stage::TrainCae);
    for &fold in &cfg.folds {
        let split = plan.fold(fold)?;
        let train = normals_of(&select_by_ids(&dataset, &split.train)?);
        let val = normals_of(&select_by_ids(&dataset, &split.val)?);
        let mut hyper = cfg.cae.clone();
        hyper.seed = derive2(cfg.cae.seed, SALT_FOLD_CAE, fold as u64);
        let out = train_cae(&train, &val, &hyper)?;
        let dir = fold_dir(&base, fold);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_checkpoint(&dir.join("cae.ckpt"), &out.checkpoint)?;
        write_curve_csv(&dir.join("curve.csv"), &out.curve)?;
    }
    Ok(format!("folds: {:?}", cfg.folds))
}

fn stage_gen_residuals(cfg: &ExperimentConfig) -> Result<String> {
    let plan = load_plan(cfg)?;
    let dataset = load_dataset(&manifest_path(cfg))?;
    let base = stage_dir(cfg, Stage::GenResiduals);
    let cae_base = stage_dir(cfg, Stage::TrainCae);
    let mut total = 0usize;
    for &fold in &cfg.folds {
        let split = plan.fold(fold)?;
        let ckpt = load_checkpoint(&fold_dir(&cae_base, fold).join("cae.ckpt"))?;
        let (mut cae, _) = cae_from_checkpoint(&ckpt)?;
        let mut ids = split.train.clone();
        ids.extend_from_slice(&split.val);
        let pool: Vec<UnlabelledVolume> =
            select_by_ids(&dataset, &ids)?.iter().map(UnlabelledVolume::from).collect();
        let entries = sweep_unlabelled(&mut cae, &pool, cfg.residuals, &fold_dir(&base, fold))?;
        total += entries.len();
    }
    Ok(format!("residuals: {total}"))
}

fn stage_pretrain(cfg: &ExperimentConfig) -> Result<String> {
    let plan = load_plan(cfg)?;
    let dataset = load_dataset(&manifest_path(cfg))?;
    let base = stage_dir(cfg, Stage::Pretrain);
    let residual_base = stage_dir(cfg, Stage::GenResiduals);
    let tasks = pretrain_tasks(cfg);
    for &fold in &cfg.folds {
        let split = plan.fold(fold)?;
        let train_pool: Vec<UnlabelledVolume> =
            select_by_ids(&dataset, &split.train)?.iter().map(UnlabelledVolume::from).collect();
        let val_pool: Vec<UnlabelledVolume> =
            select_by_ids(&dataset, &split.val)?.iter().map(UnlabelledVolume::from).collect();
        let dir = fold_dir(&base, fold);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for &task in &tasks {
            let mut task_cfg = cfg.pretrain.clone();
            task_cfg.task = task;
            task_cfg.seed = derive2(cfg.pretrain.seed, task_salt(task), fold as u64);
            let out = match task {
                PretrainTask::Residual => {
                    let residuals = load_residuals(&fold_dir(&residual_base, fold))?;
                    pretrain_residual(&train_pool, &residuals, &val_pool, &residuals, &task_cfg)?
                }
                PretrainTask::Ae => pretrain_ae(&train_pool, &val_pool, &task_cfg)?,
                PretrainTask::Dae => pretrain_dae(&train_pool, &val_pool, &task_cfg)?,
            };
            save_checkpoint(&dir.join(format!("{}.ckpt", task.stage_tag())), &out.checkpoint)?;
            write_curve_csv(&dir.join(format!("{}_curve.csv", task.stage_tag())), &out.curve)?;
        }
    }
    Ok(format!("folds: {:?}, tasks: {:?}", cfg.folds, tasks))
}

fn stage_finetune(cfg: &ExperimentConfig) -> Result<String> {
    let plan = load_plan(cfg)?;
    let dataset = load_dataset(&manifest_path(cfg))?;
    let base = stage_dir(cfg, Stage::Finetune);
    for &fold in &cfg.folds {
        let split = plan.fold(fold)?;
        let train =
            select_by_ids(&dataset, plan.take_fraction(fold, cfg.finetune.label_fraction)?)?;
        let val = select_by_ids(&dataset, &split.val)?;
        let init = load_checkpoint(&pretrain_checkpoint_path(cfg, fold, cfg.pretrain.task))?;
        let mut fold_cfg = cfg.finetune.clone();
        fold_cfg.seed = derive2(cfg.finetune.seed, SALT_FOLD_FINETUNE, fold as u64);
        let out = finetune(&train, &val, Some(&init), &fold_cfg)?;
        let dir = fold_dir(&base, fold);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_checkpoint(&dir.join("classifier.ckpt"), &out.checkpoint)?;
        write_curve_csv(&dir.join("curve.csv"), &out.curve)?;
    }
    Ok(format!("folds: {:?}", cfg.folds))
}

fn stage_evaluate(cfg: &ExperimentConfig) -> Result<String> {
    let plan = load_plan(cfg)?;
    let dataset = load_dataset(&manifest_path(cfg))?;
    let base = stage_dir(cfg, Stage::Evaluate);
    fs::create_dir_all(&base).map_err(|e| Error::io(&base, e))?;
    let finetune_base = stage_dir(cfg, Stage::Finetune);
    let mut folds = Vec::with_capacity(cfg.folds.len());
    for &fold in &cfg.folds {
        let split = plan.fold(fold)?;
        let test = select_by_ids(&dataset, &split.test)?;
        let ckpt = load_checkpoint(&fold_dir(&finetune_base, fold).join("classifier.ckpt"))?;
        let (mut model, _) = classifier_from_checkpoint(&ckpt)?;
        let outcome = evaluate(&mut model, &test, cfg.finetune.batch_size)?;
        let path = base.join(format!("fold{fold}.json"));
        let text = serde_json::to_string_pretty(&outcome).expect("outcome serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        folds.push(outcome.metrics);
    }
    let report = MetricsReport::from_folds(folds)?;
    let path = base.join("report.json");
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(format!("auprc mean: {:.4}", report.auprc.mean))
}

fn run_stage(cfg: &ExperimentConfig, stage: Stage) -> Result<()> {
    let dir = stage_dir(cfg, stage);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let summary = match stage {
        Stage::GenData => stage_gen_data(cfg),
        Stage::Split => stage_split(cfg),
        Stage::TrainCae => stage_train_cae(cfg),
        Stage::GenResiduals => stage_gen_residuals(cfg),
        Stage::Pretrain => stage_pretrain(cfg),
        Stage::Finetune => stage_finetune(cfg),
        Stage::Evaluate => stage_evaluate(cfg),
    }?;
    mark_done(&dir, &summary)
}

/// Read the evaluation report of a completed run.
pub fn read_report(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let path = stage_dir(cfg, Stage::Evaluate).join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format { path, reason: format!("report does not parse: {e}") })
}

/// Run the pipeline end to end (or up to `upto`), skipping finished stages.
///
/// Expects a resolved config (see [`ExperimentConfig::resolve`]). On a
/// stage failure the error is returned after recording it in
/// `status.json`; partial artifacts stay on disk for inspection.
pub fn run_pipeline(cfg: &ExperimentConfig, upto: Option<Stage>) -> Result<RunSummary> {
    let run_dir = ensure_scaffold(cfg)?;
    let mut summary = RunSummary {
        run_dir,
        executed: Vec::new(),
        skipped: Vec::new(),
        report: None,
    };
    for stage in Stage::ALL {
        if stage_done(cfg, stage) {
            summary.skipped.push(stage.name());
        } else {
            match run_stage(cfg, stage) {
                Ok(()) => summary.executed.push(stage.name()),
                Err(e) => {
                    write_status(cfg, Some((stage, &e)))?;
                    return Err(e);
                }
            }
        }
        if upto == Some(stage) {
            break;
        }
    }
    write_status(cfg, None)?;
    if stage_done(cfg, Stage::Evaluate) {
        summary.report = Some(read_report(cfg)?);
    }
    Ok(summary)
}

/// Run exactly one stage, requiring every earlier stage to be done.
///
/// A stage whose marker already exists is reported as skipped, not rerun.
pub fn run_single_stage(cfg: &ExperimentConfig, stage: Stage) -> Result<RunSummary> {
    let run_dir = ensure_scaffold(cfg)?;
    for earlier in Stage::ALL.into_iter().take_while(|s| *s != stage) {
        if !stage_done(cfg, earlier) {
            return Err(Error::State(format!(
                "stage '{}' needs '{}' to have completed first",
                stage.name(),
                earlier.name()
            )));
        }
    }
    let mut summary = RunSummary {
        run_dir,
        executed: Vec::new(),
        skipped: Vec::new(),
        report: None,
    };
    if stage_done(cfg, stage) {
        summary.skipped.push(stage.name());
    } else {
        match run_stage(cfg, stage) {
            Ok(()) => summary.executed.push(stage.name()),
            Err(e) => {
                write_status(cfg, Some((stage, &e)))?;
                return Err(e);
            }
        }
    }
    write_status(cfg, None)?;
    if stage_done(cfg, Stage::Evaluate) {
        summary.report = Some(read_report(cfg)?);
    }
    Ok(summary)
}

/// Which sweep to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    /// Fine-tune every configured method at every label fraction.
    Label,
    /// Retrain the autoencoder on nested normal-data fractions.
    Cae,
}

impl SweepKind {
    pub fn parse(s: &str) -> Result<SweepKind> {
        match s {
            "label" => Ok(SweepKind::Label),
            "cae" => Ok(SweepKind::Cae),
            _ => Err(Error::Argument(format!("unknown sweep '{s}' (one of: label, cae)"))),
        }
    }
}

/// Run one of the experiment sweeps against a pipeline's artifacts.
///
/// The label sweep fine-tunes from the pretraining checkpoints the
/// pipeline produced (methods without checkpoints are reported skipped);
/// the autoencoder sweep retrains everything per fraction and only needs
/// the split. Results land under `run-<digest>/sweeps/`.
pub fn run_sweep(cfg: &ExperimentConfig, kind: SweepKind) -> Result<Vec<SweepRow>> {
    ensure_scaffold(cfg)?;
    let needed = match kind {
        SweepKind::Label => Stage::Pretrain,
        SweepKind::Cae => Stage::Split,
    };
    for earlier in Stage::ALL.into_iter().filter(|s| *s <= needed) {
        if !stage_done(cfg, earlier) {
            return Err(Error::State(format!(
                "the sweep needs stage '{}' to have completed first",
                earlier.name()
            )));
        }
    }
    let plan = load_plan(cfg)?;
    let dataset = load_dataset(&manifest_path(cfg))?;
    match kind {
        SweepKind::Label => {
            let methods: Vec<SweepMethod> = cfg
                .sweep
                .methods
                .iter()
                .map(|name| SweepMethod {
                    name: name.clone(),
                    checkpoints: PretrainTask::from_name(name).map(|task| {
                        cfg.folds
                            .iter()
                            .map(|&fold| pretrain_checkpoint_path(cfg, fold, task))
                            .collect()
                    }),
                })
                .collect();
            run_label_fraction_sweep(
                &dataset,
                &plan,
                &cfg.folds,
                &methods,
                &cfg.sweep.label_fractions,
                &cfg.finetune,
                &run_dir(cfg).join("sweeps").join("label"),
            )
        }
        SweepKind::Cae => {
            let mut pretrain = cfg.pretrain.clone();
            pretrain.task = PretrainTask::Residual;
            let inputs = CaeSweepInputs {
                dataset: &dataset,
                plan: &plan,
                cae: cfg.cae.clone(),
                pretrain,
                finetune: cfg.finetune.clone(),
                label_fraction: cfg.sweep.cae_label_fraction,
            };
            run_cae_fraction_sweep(
                &inputs,
                &cfg.sweep.normal_fractions,
                &cfg.folds,
                &run_dir(cfg).join("sweeps").join("cae"),
            )
        }
    }
}
