//! Unsupervised anomaly detection stage: train the convolutional
//! autoencoder on normal volumes only, then sweep it over an unlabelled
//! pool to produce post-processed reconstruction residuals.
//!
//! The residual of a volume is the elementwise absolute difference between
//! the input and its reconstruction; on anomalous anatomy the autoencoder
//! reconstructs toward the normal manifold it was trained on, so lesions
//! surface as high-residual regions. Residuals are persisted to disk so the
//! later pretraining stage rereads them instead of recomputing.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, stack_batch, tensor_item_to_volume, UnlabelledVolume};
use crate::error::{Error, Result};
use crate::io::{load_volume, save_volume};
use crate::models::{load_checkpoint, Cae, CaeSpec, Checkpoint};
use crate::nn::{zero_grads, ReconLoss, WarmupCosine};
use crate::phantom::{Sample, SampleLabel};
use crate::seeding::derive;
use crate::volume::{abs_diff, clamp01, median_filter3d, Volume};

/// Checkpoint stage tag for autoencoder weights.
pub const CAE_STAGE: &str = "cae";

const SALT_INIT: u64 = 0xCA_01;
const SALT_ORDER: u64 = 0xCA_02;

/// Autoencoder training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CaeHyper {
    pub spec: CaeSpec,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CaeHyper {
    fn default() -> Self {
        CaeHyper {
            spec: CaeSpec::default(),
            epochs: 500,
            warmup_epochs: 20,
            base_lr: 0.2,
            weight_decay: 1e-6,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl CaeHyper {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than the run ({} epochs)",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr {} must be positive", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay {} must be non-negative",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Per-epoch training record, one CSV row.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Result of a training run: the best-validation checkpoint plus the curve.
#[derive(Debug, Clone)]
pub struct CaeTrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

fn ensure_all_normal<'a>(samples: impl Iterator<Item = &'a Sample>) -> Result<()> {
    for s in samples {
        if s.label != SampleLabel::Normal {
            return Err(Error::Contract(format!(
                "sample {} is anomalous; autoencoder training accepts normals only",
                s.id
            )));
        }
    }
    Ok(())
}

fn ensure_input_size<'a>(samples: impl Iterator<Item = &'a Sample>, size: usize) -> Result<()> {
    for s in samples {
        if s.volume.shape() != (size, size, size) {
            return Err(Error::Dimension(format!(
                "sample {} has shape {:?}, model expects {size} cubed",
                s.id,
                s.volume.shape()
            )));
        }
    }
    Ok(())
}

fn mean_val_loss(model: &mut Cae, val: &[Sample], batch_size: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for chunk in val.chunks(batch_size) {
        let vols: Vec<&Volume> = chunk.iter().map(|s| &s.volume).collect();
        let x = stack_batch(&vols).expect("validated shapes");
        let z = model.forward(&x, false);
        sum += ReconLoss::L1.loss(&z, &x) * chunk.len() as f64;
        n += chunk.len();
    }
    sum / n as f64
}

/// Train the autoencoder on normal volumes with L1 reconstruction loss.
///
/// No augmentation is applied. The checkpoint with the lowest validation
/// loss is returned together with the full loss curve. Any anomalous sample
/// in either list is a contract violation.
pub fn train_cae(train: &[Sample], val: &[Sample], hyper: &CaeHyper) -> Result<CaeTrainOutcome> {
    hyper.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract(
            "autoencoder training needs non-empty train and validation sets".into(),
        ));
    }
    ensure_all_normal(train.iter().chain(val))?;
    ensure_input_size(train.iter().chain(val), hyper.spec.input_size)?;

    let mut model = Cae::new(&hyper.spec, derive(hyper.seed, SALT_INIT))?;
    let mut opt = crate::nn::Lars::new(hyper.weight_decay);
    let schedule = WarmupCosine::new(hyper.base_lr, hyper.warmup_epochs, hyper.epochs)?;
    let config_json = serde_json::to_string(hyper).expect("hyper serializes");
    let order_seed = derive(hyper.seed, SALT_ORDER);

    let mut curve = Vec::with_capacity(hyper.epochs);
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    for epoch in 0..hyper.epochs {
        let lr = schedule.lr_at(epoch)?;
        let mut loss_sum = 0.0;
        let mut n_items = 0usize;
        for batch in epoch_batches(train.len(), hyper.batch_size, order_seed, epoch as u64) {
            let vols: Vec<&Volume> = batch.iter().map(|&i| &train[i].volume).collect();
            let x = stack_batch(&vols)?;
            zero_grads(&mut model);
            let z = model.forward(&x, true);
            let (loss, dz) = ReconLoss::L1.loss_and_grad(&z, &x);
            model.backward(&dz);
            opt.step(&mut model, lr);
            loss_sum += loss * batch.len() as f64;
            n_items += batch.len();
        }
        let train_loss = loss_sum / n_items as f64;
        let val_loss = mean_val_loss(&mut model, val, hyper.batch_size);
        curve.push(EpochStats { epoch, lr, train_loss, val_loss });
        let improved = best.as_ref().is_none_or(|(_, b, _)| val_loss < *b);
        if improved {
            let ckpt = Checkpoint::capture(
                CAE_STAGE,
                &hyper.spec,
                epoch as u64,
                val_loss,
                &config_json,
                &mut model,
            );
            best = Some((epoch, val_loss, ckpt));
        }
    }
    let (best_epoch, best_val_loss, checkpoint) = best.expect("at least one epoch ran");
    Ok(CaeTrainOutcome { checkpoint, curve, best_epoch, best_val_loss })
}

/// Write a loss curve as CSV (`epoch,lr,train_loss,val_loss`).
pub fn write_curve_csv(path: &Path, curve: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,lr,train_loss,val_loss\n");
    for row in curve {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.lr, row.train_loss, row.val_loss
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Rebuild an autoencoder from a checkpoint, restoring every tensor.
pub fn cae_from_checkpoint(ckpt: &Checkpoint) -> Result<(Cae, CaeSpec)> {
    if ckpt.stage != CAE_STAGE {
        return Err(Error::State(format!(
            "checkpoint holds stage '{}' weights, expected '{CAE_STAGE}'",
            ckpt.stage
        )));
    }
    let spec: CaeSpec = serde_json::from_str(&ckpt.spec_json)
        .map_err(|e| Error::State(format!("checkpoint spec does not parse: {e}")))?;
    spec.validate()?;
    // Weights are overwritten by the restore, so the init seed is irrelevant.
    let mut model = Cae::new(&spec, 0)?;
    ckpt.restore_into(&mut model)?;
    Ok((model, spec))
}

/// Load an autoencoder checkpoint from disk; a missing file is a state
/// error (the training stage has not produced it yet).
pub fn load_cae(path: &Path) -> Result<(Cae, CaeSpec, Checkpoint)> {
    if !path.exists() {
        return Err(Error::State(format!(
            "autoencoder checkpoint {} not found; run the training stage first",
            path.display()
        )));
    }
    let ckpt = load_checkpoint(path)?;
    let (model, spec) = cae_from_checkpoint(&ckpt)?;
    Ok((model, spec, ckpt))
}

/// Reconstruct a volume through the autoencoder (evaluation mode).
pub fn reconstruct(cae: &mut Cae, x: &Volume) -> Result<Volume> {
    let batch = stack_batch(&[x])?;
    let z = cae.forward(&batch, false);
    tensor_item_to_volume(&z, 0, format!("{}_recon", x.id), x.spacing, true)
}

/// Elementwise absolute difference between a volume and a reconstruction.
pub fn residual_between(x: &Volume, recon: &Volume) -> Result<Volume> {
    abs_diff(x, recon)
}

/// Reconstruction residual `|x - A(x)|` of a normalized volume.
pub fn residual(cae: &mut Cae, x: &Volume) -> Result<Volume> {
    let recon = reconstruct(cae, x)?;
    residual_between(x, &recon)
}

/// How a residual was post-processed before persisting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResidualPostprocess {
    Median { kernel: usize },
    None,
}

impl Default for ResidualPostprocess {
    fn default() -> Self {
        ResidualPostprocess::Median { kernel: 5 }
    }
}

/// Median-filter a residual and clamp it back to the unit range.
pub fn postprocess_residual(r: &Volume, kernel: usize) -> Result<Volume> {
    let filtered = median_filter3d(r, kernel)?;
    Ok(clamp01(&filtered))
}

fn apply_postprocess(r: &Volume, post: ResidualPostprocess) -> Result<Volume> {
    match post {
        ResidualPostprocess::Median { kernel } => postprocess_residual(r, kernel),
        ResidualPostprocess::None => Ok(clamp01(r)),
    }
}

/// A post-processed residual volume tied to its source sample.
#[derive(Debug, Clone)]
pub struct ResidualSample {
    pub input_ref: String,
    pub residual: Volume,
    pub postprocess: ResidualPostprocess,
}

/// Compute the post-processed residual of one volume.
pub fn compute_residual(
    cae: &mut Cae,
    v: &UnlabelledVolume,
    post: ResidualPostprocess,
) -> Result<ResidualSample> {
    let raw = residual(cae, &v.volume)?;
    let residual = apply_postprocess(&raw, post)?;
    Ok(ResidualSample { input_ref: v.id.clone(), residual, postprocess: post })
}

/// Manifest row for one persisted residual.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualEntry {
    pub input_ref: String,
    pub path: String,
    pub postprocess: ResidualPostprocess,
}

/// Name of the manifest file written next to the residual volumes.
pub const RESIDUAL_MANIFEST: &str = "residuals.jsonl";

/// Sweep the autoencoder over an unlabelled pool, persisting one residual
/// volume per input plus a manifest. Deterministic: rerunning with the
/// same checkpoint rewrites byte-identical files.
pub fn sweep_unlabelled(
    cae: &mut Cae,
    pool: &[UnlabelledVolume],
    post: ResidualPostprocess,
    out_dir: &Path,
) -> Result<Vec<ResidualEntry>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(pool.len());
    for v in pool {
        let sample = compute_residual(cae, v, post)?;
        let rel = format!("{}.svol", sample.input_ref);
        save_volume(out_dir.join(&rel), &sample.residual)?;
        entries.push(ResidualEntry { input_ref: sample.input_ref, path: rel, postprocess: post });
    }
    let manifest = out_dir.join(RESIDUAL_MANIFEST);
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    for entry in &entries {
        let line = serde_json::to_string(entry).expect("entry serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(&manifest, e))?;
    }
    Ok(entries)
}

/// Read a residual manifest written by [`sweep_unlabelled`].
pub fn read_residual_manifest(dir: &Path) -> Result<Vec<ResidualEntry>> {
    let manifest = dir.join(RESIDUAL_MANIFEST);
    let f = fs::File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ResidualEntry = serde_json::from_str(&line).map_err(|e| {
            Error::format(&manifest, format!("manifest line {}: {e}", i + 1))
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Load all residuals referenced by a directory's manifest.
pub fn load_residuals(dir: &Path) -> Result<Vec<ResidualSample>> {
    let entries = read_residual_manifest(dir)?;
    entries
        .into_iter()
        .map(|e| {
            let path: PathBuf = dir.join(&e.path);
            let residual = load_volume(&path)?;
            Ok(ResidualSample { input_ref: e.input_ref, residual, postprocess: e.postprocess })
        })
        .collect()
}
