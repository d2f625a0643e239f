//! Self-supervised pretraining: an encoder/decoder learns to reconstruct
//! residual volumes from the original volumes, alongside plain and
//! denoising autoencoder baselines.
//!
//! All three tasks share one training loop. Per item the loop draws an
//! augmentation plan (geometry applied to input and target alike,
//! intensity noise to the input only) and then a task-corruption noise
//! field that is always sampled but scaled by the task's sigma — zero for
//! everything except the denoising task. Always sampling keeps the RNG
//! streams of the tasks aligned, so a denoising run with sigma 0 replays
//! the plain autoencoder run exactly.
//!
//! The loop never sees labels: its inputs carry only an id and voxels.

use serde::{Deserialize, Serialize};

use crate::augment::{augment_pair, standard_normal_field, AugmentationPolicy};
use crate::data::{epoch_batches, stack_batch, UnlabelledVolume};
use crate::error::{Error, Result};
use crate::models::{Checkpoint, UnetSpec, UnetSsl};
use crate::nn::{zero_grads, Lars, ReconLoss, WarmupCosine};
use crate::seeding::{derive, derive2};
use crate::uad::{EpochStats, ResidualSample};
use crate::volume::{clamp01, Volume};

const SALT_INIT: u64 = 0x55_01;
const SALT_ORDER: u64 = 0x55_02;
const SALT_AUG: u64 = 0x55_03;
const SALT_VAL_NOISE: u64 = 0x55_04;

/// Pretext task choices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainTask {
    /// Reconstruct the autoencoder residual of the input volume.
    Residual,
    /// Reconstruct the input volume itself.
    Ae,
    /// Reconstruct the clean volume from a noise-corrupted input.
    Dae,
}

impl PretrainTask {
    /// Checkpoint stage tag for this task.
    pub fn stage_tag(self) -> &'static str {
        match self {
            PretrainTask::Residual => "residual",
            PretrainTask::Ae => "ae",
            PretrainTask::Dae => "dae",
        }
    }

    /// Inverse of [`Self::stage_tag`].
    pub fn from_name(name: &str) -> Option<PretrainTask> {
        match name {
            "residual" => Some(PretrainTask::Residual),
            "ae" => Some(PretrainTask::Ae),
            "dae" => Some(PretrainTask::Dae),
            _ => None,
        }
    }
}

/// Pretraining hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub task: PretrainTask,
    pub loss: ReconLoss,
    pub unet: UnetSpec,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Corruption noise for the denoising task, applied at 100% probability.
    pub dae_noise_mean: f64,
    pub dae_noise_std: f64,
    pub augmentation: AugmentationPolicy,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            task: PretrainTask::Residual,
            loss: ReconLoss::BceLogits,
            unet: UnetSpec::default(),
            epochs: 500,
            warmup_epochs: 20,
            lr: 0.2,
            weight_decay: 1e-6,
            batch_size: 256,
            dae_noise_mean: 0.0,
            dae_noise_std: 0.6,
            augmentation: AugmentationPolicy::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.augmentation.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than the run ({} epochs)",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
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
        if !(self.dae_noise_std >= 0.0 && self.dae_noise_std.is_finite())
            || !self.dae_noise_mean.is_finite()
        {
            return Err(Error::Config("denoising noise parameters must be finite".into()));
        }
        Ok(())
    }
}

/// Learning rate under the batch-linear scaling convention: the configured
/// rate holds at batch 256 and shrinks proportionally below it.
pub fn effective_lr(lr: f64, batch_size: usize) -> f64 {
    lr * batch_size as f64 / 256.0
}

/// Scheduled learning rate at `epoch` under the config's nominal rate
/// (linear warmup to `cfg.lr`, then cosine to zero at the final epoch).
pub fn lr_at(cfg: &PretrainConfig, epoch: usize) -> Result<f64> {
    WarmupCosine::new(cfg.lr, cfg.warmup_epochs, cfg.epochs)?.lr_at(epoch)
}

/// One input/target pair for the shared loop.
#[derive(Debug, Clone)]
pub struct PretrainItem {
    pub id: String,
    pub input: Volume,
    pub target: Volume,
}

/// Join volumes with their residual targets by sample id.
///
/// Every volume must have a residual; residuals covering a wider pool are
/// fine. Targets outside the unit range violate the task contract.
pub fn match_residuals(
    volumes: &[UnlabelledVolume],
    residuals: &[ResidualSample],
) -> Result<Vec<PretrainItem>> {
    let by_ref: std::collections::BTreeMap<&str, &ResidualSample> =
        residuals.iter().map(|r| (r.input_ref.as_str(), r)).collect();
    volumes
        .iter()
        .map(|v| {
            let r = by_ref.get(v.id.as_str()).ok_or_else(|| {
                Error::Contract(format!("volume {} has no residual target", v.id))
            })?;
            if r.residual.min() < 0.0 || r.residual.max() > 1.0 {
                return Err(Error::Contract(format!(
                    "residual target {} leaves the unit range [{}, {}]",
                    v.id,
                    r.residual.min(),
                    r.residual.max()
                )));
            }
            if r.residual.shape() != v.volume.shape() {
                return Err(Error::Dimension(format!(
                    "residual {} shaped {:?} does not match volume {:?}",
                    v.id,
                    r.residual.shape(),
                    v.volume.shape()
                )));
            }
            Ok(PretrainItem { id: v.id.clone(), input: v.volume.clone(), target: r.residual.clone() })
        })
        .collect()
}

fn identity_items(volumes: &[UnlabelledVolume]) -> Vec<PretrainItem> {
    volumes
        .iter()
        .map(|v| PretrainItem { id: v.id.clone(), input: v.volume.clone(), target: v.volume.clone() })
        .collect()
}

/// Result of a pretraining run.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Actual schedule peak after batch-linear scaling; also recorded in
    /// the checkpoint's run metadata.
    pub effective_lr: f64,
}

/// Run metadata stored in the checkpoint alongside the config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainRunMeta {
    pub config: PretrainConfig,
    pub effective_lr: f64,
}

/// Add the task-corruption field to a volume and clamp back to unit range.
///
/// The field is drawn unconditionally so every task consumes the same
/// number of RNG values; with zero noise the volume passes through
/// untouched and the run replays the plain autoencoder exactly.
fn corrupt(v: &Volume, mean: f64, std: f64, rng: &mut rand_chacha::ChaCha12Rng) -> Volume {
    let field = standard_normal_field(v.shape(), rng);
    if mean == 0.0 && std == 0.0 {
        return v.clone();
    }
    let mut out = v.clone();
    ndarray::Zip::from(&mut out.data)
        .and(&field)
        .for_each(|o, &n| *o += mean as f32 + std as f32 * n);
    clamp01(&out)
}

fn task_noise(cfg: &PretrainConfig) -> (f64, f64) {
    match cfg.task {
        PretrainTask::Dae => (cfg.dae_noise_mean, cfg.dae_noise_std),
        PretrainTask::Residual | PretrainTask::Ae => (0.0, 0.0),
    }
}

fn ensure_item_shapes(items: &[PretrainItem], size: usize) -> Result<()> {
    for it in items {
        if it.input.shape() != (size, size, size) {
            return Err(Error::Dimension(format!(
                "volume {} shaped {:?}, model expects {size} cubed",
                it.id,
                it.input.shape()
            )));
        }
    }
    Ok(())
}

fn run_pretrain(
    train: &[PretrainItem],
    val: &[PretrainItem],
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract(
            "pretraining needs non-empty train and validation sets".into(),
        ));
    }
    let size = cfg.unet.encoder.input_size;
    ensure_item_shapes(train, size)?;
    ensure_item_shapes(val, size)?;

    let (noise_mean, noise_std) = task_noise(cfg);
    let mut model = UnetSsl::new(&cfg.unet, derive(cfg.seed, SALT_INIT))?;
    let mut opt = Lars::new(cfg.weight_decay);
    let eff = effective_lr(cfg.lr, cfg.batch_size);
    let schedule = WarmupCosine::new(eff, cfg.warmup_epochs, cfg.epochs)?;
    let order_seed = derive(cfg.seed, SALT_ORDER);
    let aug_seed = derive(cfg.seed, SALT_AUG);
    let run_meta =
        serde_json::to_string(&PretrainRunMeta { config: cfg.clone(), effective_lr: eff })
            .expect("config serializes");

    // Validation inputs are corrupted once with a fixed per-item stream
    // (no geometric augmentation), so epochs stay comparable.
    let val_inputs: Vec<Volume> = val
        .iter()
        .enumerate()
        .map(|(i, it)| {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(derive2(
                cfg.seed,
                SALT_VAL_NOISE,
                i as u64,
            ));
            corrupt(&it.input, noise_mean, noise_std, &mut rng)
        })
        .collect();

    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch)?;
        let mut loss_sum = 0.0;
        let mut n_items = 0usize;
        for batch in epoch_batches(train.len(), cfg.batch_size, order_seed, epoch as u64) {
            let mut inputs = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for &i in &batch {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(derive2(
                    aug_seed,
                    epoch as u64,
                    i as u64,
                ));
                let item = &train[i];
                let (x, t) = augment_pair(&item.input, &item.target, &cfg.augmentation, &mut rng);
                inputs.push(corrupt(&x, noise_mean, noise_std, &mut rng));
                targets.push(t);
            }
            let x = stack_batch(&inputs.iter().collect::<Vec<_>>())?;
            let t = stack_batch(&targets.iter().collect::<Vec<_>>())?;
            zero_grads(&mut model);
            let z = model.forward(&x, true);
            let (loss, dz) = cfg.loss.loss_and_grad(&z, &t);
            model.backward(&dz);
            opt.step(&mut model, lr);
            loss_sum += loss * batch.len() as f64;
            n_items += batch.len();
        }
        let train_loss = loss_sum / n_items as f64;
        let val_loss = pretrain_val_loss(&mut model, &val_inputs, val, cfg)?;
        curve.push(EpochStats { epoch, lr, train_loss, val_loss });
        if best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            let ckpt = Checkpoint::capture(
                cfg.task.stage_tag(),
                &cfg.unet,
                epoch as u64,
                val_loss,
                &run_meta,
                &mut model,
            );
            best = Some((epoch, val_loss, ckpt));
        }
    }
    let (best_epoch, best_val_loss, checkpoint) = best.expect("at least one epoch ran");
    Ok(PretrainOutcome { checkpoint, curve, best_epoch, best_val_loss, effective_lr: eff })
}

fn pretrain_val_loss(
    model: &mut UnetSsl,
    val_inputs: &[Volume],
    val: &[PretrainItem],
    cfg: &PretrainConfig,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (chunk_inputs, chunk_items) in val_inputs
        .chunks(cfg.batch_size)
        .zip(val.chunks(cfg.batch_size))
    {
        let x = stack_batch(&chunk_inputs.iter().collect::<Vec<_>>())?;
        let t = stack_batch(&chunk_items.iter().map(|it| &it.target).collect::<Vec<_>>())?;
        let z = model.forward(&x, false);
        sum += cfg.loss.loss(&z, &t) * chunk_items.len() as f64;
        n += chunk_items.len();
    }
    Ok(sum / n as f64)
}

fn ensure_task(cfg: &PretrainConfig, expected: PretrainTask) -> Result<()> {
    if cfg.task != expected {
        return Err(Error::Config(format!(
            "config names task {:?} but the {:?} entry point was called",
            cfg.task, expected
        )));
    }
    Ok(())
}

/// Pretrain by reconstructing residual targets from (augmented) inputs.
pub fn pretrain_residual(
    train_volumes: &[UnlabelledVolume],
    train_residuals: &[ResidualSample],
    val_volumes: &[UnlabelledVolume],
    val_residuals: &[ResidualSample],
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    ensure_task(cfg, PretrainTask::Residual)?;
    let train = match_residuals(train_volumes, train_residuals)?;
    let val = match_residuals(val_volumes, val_residuals)?;
    run_pretrain(&train, &val, cfg)
}

/// Pretrain by reconstructing the input volume itself.
pub fn pretrain_ae(
    train_volumes: &[UnlabelledVolume],
    val_volumes: &[UnlabelledVolume],
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    ensure_task(cfg, PretrainTask::Ae)?;
    run_pretrain(&identity_items(train_volumes), &identity_items(val_volumes), cfg)
}

/// Pretrain by reconstructing the clean volume from a corrupted input.
pub fn pretrain_dae(
    train_volumes: &[UnlabelledVolume],
    val_volumes: &[UnlabelledVolume],
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    ensure_task(cfg, PretrainTask::Dae)?;
    run_pretrain(&identity_items(train_volumes), &identity_items(val_volumes), cfg)
}

/// Rebuild the pretraining network from one of its checkpoints.
pub fn unet_from_checkpoint(ckpt: &Checkpoint) -> Result<(UnetSsl, UnetSpec)> {
    let known = ["residual", "ae", "dae"];
    if !known.contains(&ckpt.stage.as_str()) {
        return Err(Error::State(format!(
            "checkpoint holds stage '{}' weights, expected a pretraining stage",
            ckpt.stage
        )));
    }
    let spec: UnetSpec = serde_json::from_str(&ckpt.spec_json)
        .map_err(|e| Error::State(format!("checkpoint spec does not parse: {e}")))?;
    spec.validate()?;
    let mut model = UnetSsl::new(&spec, 0)?;
    ckpt.restore_into(&mut model)?;
    Ok((model, spec))
}
