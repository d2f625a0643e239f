//! Supervised fine-tuning of the pretrained encoder, test-set evaluation,
//! and the two experiment sweeps (label fraction, autoencoder data
//! fraction).
//!
//! Fine-tuning attaches a two-layer MLP head to the encoder, optionally
//! restores encoder weights from a pretraining checkpoint, and trains the
//! whole network with cross-entropy at a constant learning rate. Scores
//! for the ranking metrics are the softmax probability of the anomalous
//! class; the hard F1 decision is the argmax.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentationPolicy};
use crate::data::{epoch_batches, select_by_ids, stack_batch, UnlabelledVolume};
use crate::error::{Error, Result};
use crate::metrics::{auprc, auroc, f1_score, FoldMetrics, MetricsReport};
use crate::models::{
    load_checkpoint, spec_hash, Checkpoint, Classifier, ClassifierSpec, UnetSpec,
};
use crate::nn::{softmax, softmax_cross_entropy, zero_grads, AdamW};
use crate::phantom::{Sample, SampleLabel};
use crate::plot::{write_line_chart, Series};
use crate::seeding::{derive, derive2};
use crate::splits::SplitPlan;
use crate::ssl::{pretrain_residual, PretrainConfig, PretrainTask};
use crate::uad::{
    compute_residual, train_cae, CaeHyper, EpochStats, ResidualPostprocess, ResidualSample,
};
use crate::volume::Volume;

/// Checkpoint stage tag for fine-tuned classifier weights.
pub const CLASSIFIER_STAGE: &str = "classifier";

const SALT_INIT: u64 = 0xF7_01;
const SALT_ORDER: u64 = 0xF7_02;
const SALT_AUG: u64 = 0xF7_03;

/// Where fine-tuning gets its initial encoder weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FinetuneInit {
    Scratch,
    Checkpoint { path: PathBuf },
}

/// Fine-tuning hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub classifier: ClassifierSpec,
    pub epochs: usize,
    /// Constant learning rate; no schedule.
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Percent of the labelled training split to use, in (0, 100].
    pub label_fraction: u32,
    pub augmentation: AugmentationPolicy,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            classifier: ClassifierSpec::default(),
            epochs: 100,
            lr: 1e-4,
            weight_decay: 1e-2,
            batch_size: 16,
            label_fraction: 100,
            augmentation: AugmentationPolicy::default(),
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.classifier.validate()?;
        self.augmentation.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.label_fraction == 0 || self.label_fraction > 100 {
            return Err(Error::Config(format!(
                "label_fraction {} must be in (0, 100]",
                self.label_fraction
            )));
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

fn class_index(label: SampleLabel) -> usize {
    match label {
        SampleLabel::Normal => 0,
        SampleLabel::Anomalous => 1,
    }
}

/// Result of a fine-tuning run.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Number of encoder tensors restored from the init checkpoint (zero
    /// for scratch runs).
    pub restored_tensors: usize,
}

/// Restore pretrained encoder weights into a classifier.
///
/// The checkpoint must come from a pretraining stage whose encoder spec
/// matches the classifier's; anything else is a spec mismatch.
pub fn restore_encoder(model: &mut Classifier, spec: &ClassifierSpec, ckpt: &Checkpoint) -> Result<usize> {
    let known = ["residual", "ae", "dae"];
    if !known.contains(&ckpt.stage.as_str()) {
        return Err(Error::State(format!(
            "checkpoint holds stage '{}' weights, expected a pretraining stage",
            ckpt.stage
        )));
    }
    let unet: UnetSpec = serde_json::from_str(&ckpt.spec_json)
        .map_err(|e| Error::State(format!("checkpoint spec does not parse: {e}")))?;
    if unet.encoder != spec.encoder {
        return Err(Error::SpecHashMismatch {
            expected: spec_hash(&spec.encoder),
            found: spec_hash(&unet.encoder),
        });
    }
    ckpt.restore_matching(model, "enc.")
}

fn ensure_sample_shapes(samples: &[Sample], size: usize) -> Result<()> {
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

fn val_ce_loss(model: &mut Classifier, val: &[Sample], batch_size: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for chunk in val.chunks(batch_size) {
        let vols: Vec<&Volume> = chunk.iter().map(|s| &s.volume).collect();
        let x = stack_batch(&vols)?;
        let logits = model.forward(&x, false);
        let targets: Vec<usize> = chunk.iter().map(|s| class_index(s.label)).collect();
        let (loss, _) = softmax_cross_entropy(&logits, &targets);
        sum += loss * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(sum / n as f64)
}

/// Fine-tune the encoder plus MLP head on labelled samples.
///
/// `init` supplies pretrained encoder weights; `None` trains from scratch
/// (the no-pretraining baseline). The best-validation-loss checkpoint is
/// returned with the loss curve.
pub fn finetune(
    train: &[Sample],
    val: &[Sample],
    init: Option<&Checkpoint>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract(
            "fine-tuning needs non-empty train and validation sets".into(),
        ));
    }
    let size = cfg.classifier.encoder.input_size;
    ensure_sample_shapes(train, size)?;
    ensure_sample_shapes(val, size)?;

    let mut model = Classifier::new(&cfg.classifier, derive(cfg.seed, SALT_INIT))?;
    let restored_tensors = match init {
        Some(ckpt) => restore_encoder(&mut model, &cfg.classifier, ckpt)?,
        None => 0,
    };
    let mut opt = AdamW::new(cfg.weight_decay);
    let config_json = serde_json::to_string(cfg).expect("config serializes");
    let order_seed = derive(cfg.seed, SALT_ORDER);
    let aug_seed = derive(cfg.seed, SALT_AUG);

    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut n_items = 0usize;
        for batch in epoch_batches(train.len(), cfg.batch_size, order_seed, epoch as u64) {
            let mut vols = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for &i in &batch {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(derive2(
                    aug_seed,
                    epoch as u64,
                    i as u64,
                ));
                vols.push(augment(&train[i].volume, &cfg.augmentation, &mut rng));
                targets.push(class_index(train[i].label));
            }
            let x = stack_batch(&vols.iter().collect::<Vec<_>>())?;
            zero_grads(&mut model);
            let logits = model.forward(&x, true);
            let (loss, dlogits) = softmax_cross_entropy(&logits, &targets);
            model.backward(&dlogits);
            opt.step(&mut model, cfg.lr);
            loss_sum += loss * batch.len() as f64;
            n_items += batch.len();
        }
        let train_loss = loss_sum / n_items as f64;
        let val_loss = val_ce_loss(&mut model, val, cfg.batch_size)?;
        curve.push(EpochStats { epoch, lr: cfg.lr, train_loss, val_loss });
        if best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            let ckpt = Checkpoint::capture(
                CLASSIFIER_STAGE,
                &cfg.classifier,
                epoch as u64,
                val_loss,
                &config_json,
                &mut model,
            );
            best = Some((epoch, val_loss, ckpt));
        }
    }
    let (best_epoch, best_val_loss, checkpoint) = best.expect("at least one epoch ran");
    Ok(FinetuneOutcome { checkpoint, curve, best_epoch, best_val_loss, restored_tensors })
}

/// Rebuild a classifier from its fine-tuning checkpoint.
pub fn classifier_from_checkpoint(ckpt: &Checkpoint) -> Result<(Classifier, ClassifierSpec)> {
    if ckpt.stage != CLASSIFIER_STAGE {
        return Err(Error::State(format!(
            "checkpoint holds stage '{}' weights, expected '{CLASSIFIER_STAGE}'",
            ckpt.stage
        )));
    }
    let spec: ClassifierSpec = serde_json::from_str(&ckpt.spec_json)
        .map_err(|e| Error::State(format!("checkpoint spec does not parse: {e}")))?;
    spec.validate()?;
    let mut model = Classifier::new(&spec, 0)?;
    ckpt.restore_into(&mut model)?;
    Ok((model, spec))
}

/// Scores, decisions, and metrics from one pass over a test set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub predictions: Vec<bool>,
    pub metrics: FoldMetrics,
    /// Forward passes consumed by this evaluation: exactly one per item.
    pub items_scored: usize,
}

/// Evaluate a classifier on a labelled test set in a single pass.
pub fn evaluate(model: &mut Classifier, test: &[Sample], batch_size: usize) -> Result<EvalOutcome> {
    if test.is_empty() {
        return Err(Error::Contract("evaluation needs a non-empty test set".into()));
    }
    if batch_size == 0 {
        return Err(Error::Argument("batch_size must be at least 1".into()));
    }
    let mut ids = Vec::with_capacity(test.len());
    let mut scores = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    let mut predictions = Vec::with_capacity(test.len());
    for chunk in test.chunks(batch_size) {
        let vols: Vec<&Volume> = chunk.iter().map(|s| &s.volume).collect();
        let x = stack_batch(&vols)?;
        let logits = model.forward(&x, false);
        for (row, s) in logits.outer_iter().zip(chunk) {
            let probs = softmax(row.as_slice().expect("contiguous logit row"));
            ids.push(s.id.clone());
            scores.push(probs[1]);
            labels.push(s.label == SampleLabel::Anomalous);
            predictions.push(probs[1] > probs[0]);
        }
    }
    let metrics = FoldMetrics {
        auroc: auroc(&scores, &labels)?,
        auprc: auprc(&scores, &labels)?,
        f1: f1_score(&predictions, &labels)?,
    };
    let items_scored = ids.len();
    Ok(EvalOutcome { ids, scores, labels, predictions, metrics, items_scored })
}

/// One fine-tuning method in a sweep: a display name plus pretraining
/// checkpoints, one per swept fold in the same order (none = scratch).
#[derive(Debug, Clone)]
pub struct SweepMethod {
    pub name: String,
    pub checkpoints: Option<Vec<PathBuf>>,
}

/// Why a sweep cell has no metrics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepStatus {
    Ok,
    SkippedMissingCheckpoint,
}

/// One aggregated sweep row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub fraction: u32,
    pub status: SweepStatus,
    pub report: Option<MetricsReport>,
}

fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "method,fraction,status,auroc_mean,auroc_ci_low,auroc_ci_high,\
         auprc_mean,auprc_ci_low,auprc_ci_high,f1_mean,f1_ci_low,f1_ci_high\n",
    );
    for r in rows {
        match (&r.status, &r.report) {
            (SweepStatus::Ok, Some(rep)) => out.push_str(&format!(
                "{},{},ok,{},{},{},{},{},{},{},{},{}\n",
                r.method,
                r.fraction,
                rep.auroc.mean,
                rep.auroc.ci95_low,
                rep.auroc.ci95_high,
                rep.auprc.mean,
                rep.auprc.ci95_low,
                rep.auprc.ci95_high,
                rep.f1.mean,
                rep.f1.ci95_low,
                rep.f1.ci95_high,
            )),
            _ => out.push_str(&format!(
                "{},{},skipped_missing_checkpoint,,,,,,,,,\n",
                r.method, r.fraction
            )),
        }
    }
    out
}

fn plot_sweep(rows: &[SweepRow], x_label: &str, out_dir: &Path, stem: &str) -> Result<()> {
    for (metric, pick) in [
        ("auroc", (|rep: &MetricsReport| rep.auroc.mean) as fn(&MetricsReport) -> f64),
        ("auprc", |rep: &MetricsReport| rep.auprc.mean),
    ] {
        let mut by_method: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        for r in rows {
            let Some(rep) = &r.report else { continue };
            match by_method.iter_mut().find(|(m, _)| *m == r.method) {
                Some((_, pts)) => pts.push((r.fraction as f64, pick(rep))),
                None => by_method.push((r.method.clone(), vec![(r.fraction as f64, pick(rep))])),
            }
        }
        if by_method.is_empty() {
            continue;
        }
        let series: Vec<Series> = by_method
            .into_iter()
            .map(|(name, points)| Series { name, points })
            .collect();
        write_line_chart(
            &out_dir.join(format!("{stem}_{metric}.svg")),
            &format!("{metric} vs {x_label}"),
            x_label,
            metric,
            &series,
        )?;
    }
    Ok(())
}

fn prepare_fractions(fractions: &[u32]) -> Result<Vec<u32>> {
    if fractions.is_empty() {
        return Err(Error::Config("sweep needs at least one fraction".into()));
    }
    let mut f = fractions.to_vec();
    f.sort_unstable();
    f.dedup();
    Ok(f)
}

fn check_fold_count(folds: &[usize]) -> Result<()> {
    if folds.len() < 2 {
        return Err(Error::Config(
            "sweeps aggregate across folds and need at least 2".into(),
        ));
    }
    Ok(())
}

/// Fine-tune and evaluate one split fold, returning its test metrics.
fn run_cell(
    dataset: &[Sample],
    plan: &SplitPlan,
    fold: usize,
    fraction: u32,
    init: Option<&Checkpoint>,
    base: &FinetuneConfig,
) -> Result<FoldMetrics> {
    let train = select_by_ids(dataset, plan.take_fraction(fold, fraction)?)?;
    let fold_split = plan.fold(fold)?;
    let val = select_by_ids(dataset, &fold_split.val)?;
    let test = select_by_ids(dataset, &fold_split.test)?;
    let mut cfg = base.clone();
    cfg.label_fraction = fraction;
    cfg.seed = derive2(base.seed, fold as u64, fraction as u64);
    let out = finetune(&train, &val, init, &cfg)?;
    let (mut model, _) = classifier_from_checkpoint(&out.checkpoint)?;
    Ok(evaluate(&mut model, &test, cfg.batch_size)?.metrics)
}

/// Fine-tune every method at every label fraction across folds.
///
/// Emits `label_fraction_sweep.csv` plus AUROC/AUPRC line charts under
/// `out_dir`. A method whose checkpoint file is missing is reported as
/// skipped and the sweep continues.
pub fn run_label_fraction_sweep(
    dataset: &[Sample],
    plan: &SplitPlan,
    folds: &[usize],
    methods: &[SweepMethod],
    fractions: &[u32],
    base: &FinetuneConfig,
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    check_fold_count(folds)?;
    if methods.is_empty() {
        return Err(Error::Config("sweep needs at least one method".into()));
    }
    let fractions = prepare_fractions(fractions)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut rows = Vec::new();
    for method in methods {
        let inits: Option<Vec<Checkpoint>> = match &method.checkpoints {
            None => Some(Vec::new()),
            Some(paths) => {
                if paths.len() != folds.len() {
                    return Err(Error::Config(format!(
                        "method '{}' supplies {} checkpoints for {} folds",
                        method.name,
                        paths.len(),
                        folds.len()
                    )));
                }
                if paths.iter().all(|p| p.exists()) {
                    Some(paths.iter().map(|p| load_checkpoint(p)).collect::<Result<_>>()?)
                } else {
                    None
                }
            }
        };
        let Some(inits) = inits else {
            for &fraction in &fractions {
                rows.push(SweepRow {
                    method: method.name.clone(),
                    fraction,
                    status: SweepStatus::SkippedMissingCheckpoint,
                    report: None,
                });
            }
            continue;
        };
        for &fraction in &fractions {
            let mut fold_metrics = Vec::with_capacity(folds.len());
            for (slot, &fold) in folds.iter().enumerate() {
                let init = if inits.is_empty() { None } else { Some(&inits[slot]) };
                fold_metrics.push(run_cell(dataset, plan, fold, fraction, init, base)?);
            }
            rows.push(SweepRow {
                method: method.name.clone(),
                fraction,
                status: SweepStatus::Ok,
                report: Some(MetricsReport::from_folds(fold_metrics)?),
            });
        }
    }
    let csv_path = out_dir.join("label_fraction_sweep.csv");
    fs::write(&csv_path, sweep_csv(&rows)).map_err(|e| Error::io(&csv_path, e))?;
    plot_sweep(&rows, "label fraction (%)", out_dir, "label_fraction")?;
    Ok(rows)
}

/// Everything the autoencoder-data sweep needs besides the fraction list.
#[derive(Debug, Clone)]
pub struct CaeSweepInputs<'a> {
    pub dataset: &'a [Sample],
    pub plan: &'a SplitPlan,
    pub cae: CaeHyper,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    /// Label fraction for the downstream fine-tuning runs.
    pub label_fraction: u32,
}

/// Retrain the autoencoder on nested fractions of the normal training
/// data, regenerate residuals, pretrain, and fine-tune at a fixed label
/// fraction. One row per fraction; CSV and charts under `out_dir`.
pub fn run_cae_fraction_sweep(
    inputs: &CaeSweepInputs<'_>,
    fractions: &[u32],
    folds: &[usize],
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    check_fold_count(folds)?;
    if inputs.pretrain.task != PretrainTask::Residual {
        return Err(Error::Config(
            "the autoencoder-data sweep pretrains on residuals".into(),
        ));
    }
    let fractions = prepare_fractions(fractions)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut rows = Vec::new();
    for &fraction in &fractions {
        let mut fold_metrics = Vec::with_capacity(folds.len());
        for &fold in folds {
            let fold_split = inputs.plan.fold(fold)?;
            let normals =
                select_by_ids(inputs.dataset, inputs.plan.take_normal_fraction(fold, fraction)?)?;
            let val_samples = select_by_ids(inputs.dataset, &fold_split.val)?;
            let val_normals: Vec<Sample> = val_samples
                .iter()
                .filter(|s| s.label == SampleLabel::Normal)
                .cloned()
                .collect();

            let mut cae_hyper = inputs.cae.clone();
            cae_hyper.seed = derive2(inputs.cae.seed, fold as u64, fraction as u64);
            let cae_out = train_cae(&normals, &val_normals, &cae_hyper)?;
            let (mut cae, _) = crate::uad::cae_from_checkpoint(&cae_out.checkpoint)?;

            let train_pool: Vec<UnlabelledVolume> =
                select_by_ids(inputs.dataset, &fold_split.train)?
                    .iter()
                    .map(UnlabelledVolume::from)
                    .collect();
            let val_pool: Vec<UnlabelledVolume> =
                val_samples.iter().map(UnlabelledVolume::from).collect();
            let post = ResidualPostprocess::default();
            let train_items: Vec<ResidualSample> = train_pool
                .iter()
                .map(|v| compute_residual(&mut cae, v, post))
                .collect::<Result<_>>()?;
            let val_items: Vec<ResidualSample> = val_pool
                .iter()
                .map(|v| compute_residual(&mut cae, v, post))
                .collect::<Result<_>>()?;

            let mut pre_cfg = inputs.pretrain.clone();
            pre_cfg.seed = derive2(inputs.pretrain.seed, fold as u64, fraction as u64);
            let pre_out = pretrain_residual(
                &train_pool,
                &train_items,
                &val_pool,
                &val_items,
                &pre_cfg,
            )?;

            fold_metrics.push(run_cell(
                inputs.dataset,
                inputs.plan,
                fold,
                inputs.label_fraction,
                Some(&pre_out.checkpoint),
                &inputs.finetune,
            )?);
        }
        rows.push(SweepRow {
            method: "residual".into(),
            fraction,
            status: SweepStatus::Ok,
            report: Some(MetricsReport::from_folds(fold_metrics)?),
        });
    }
    let csv_path = out_dir.join("cae_fraction_sweep.csv");
    fs::write(&csv_path, sweep_csv(&rows)).map_err(|e| Error::io(&csv_path, e))?;
    plot_sweep(&rows, "autoencoder data fraction (%)", out_dir, "cae_fraction")?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{EncoderSpec, HeadSpec, UnetSsl};
    use crate::nn::ReconLoss;
    use crate::phantom::{generate_dataset, PhantomConfig, Side};
    use crate::splits::{make_split, SampleMeta, SplitConfig};
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn micro_encoder() -> EncoderSpec {
        EncoderSpec {
            input_size: 16,
            stem_channels: 4,
            stage_channels: vec![4, 8],
            blocks_per_stage: 1,
        }
    }

    fn micro_classifier() -> ClassifierSpec {
        let encoder = micro_encoder();
        let head = HeadSpec { in_dim: encoder.feature_dim(), hidden_dim: 8, n_classes: 2 };
        ClassifierSpec { encoder, head }
    }

    fn micro_cfg(epochs: usize, lr: f64, seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            classifier: micro_classifier(),
            epochs,
            lr,
            weight_decay: 0.0,
            batch_size: 4,
            label_fraction: 100,
            augmentation: AugmentationPolicy::disabled(),
            seed,
        }
    }

    /// Two classes separated by mean intensity, far beyond the noise.
    fn separable_samples(n_per_class: usize, seed: u64) -> Vec<Sample> {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.02).unwrap();
        let mut out = Vec::new();
        for i in 0..2 * n_per_class {
            let anomalous = i % 2 == 1;
            let base: f64 = if anomalous { 0.75 } else { 0.25 };
            let data = Array3::from_shape_fn((16, 16, 16), |_| {
                (base + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32
            });
            let patient = format!("p{:04}", i / 2);
            let side = if i % 2 == 0 { Side::Left } else { Side::Right };
            let id = format!("{}_{}", patient, side.letter());
            out.push(Sample {
                id: id.clone(),
                patient,
                side,
                label: if anomalous { SampleLabel::Anomalous } else { SampleLabel::Normal },
                anomaly_kind: None,
                volume: Volume::new(data, [1.0; 3], id).unwrap(),
                gt_mask: None,
            });
        }
        out
    }

    #[test]
    fn separable_classes_are_learned() {
        let samples = separable_samples(8, 11);
        let (train, val) = samples.split_at(12);
        let cfg = micro_cfg(12, 2e-2, 3);
        let out = finetune(train, val, None, &cfg).unwrap();
        assert_eq!(out.restored_tensors, 0);
        assert_eq!(out.curve.len(), 12);
        let (mut model, _) = classifier_from_checkpoint(&out.checkpoint).unwrap();
        let eval = evaluate(&mut model, train, 4).unwrap();
        let correct = eval
            .predictions
            .iter()
            .zip(&eval.labels)
            .filter(|(p, l)| p == l)
            .count();
        assert!(
            correct as f64 / train.len() as f64 >= 0.95,
            "only {correct}/{} correct on a trivially separable set",
            train.len()
        );
        assert!(eval.metrics.auroc > 0.95, "auroc {}", eval.metrics.auroc);
    }

    #[test]
    fn finetune_is_deterministic() {
        let samples = separable_samples(4, 5);
        let (train, val) = samples.split_at(6);
        let cfg = micro_cfg(3, 1e-3, 9);
        let a = finetune(train, val, None, &cfg).unwrap();
        let b = finetune(train, val, None, &cfg).unwrap();
        assert_eq!(a.best_epoch, b.best_epoch);
        assert_eq!(a.best_val_loss.to_bits(), b.best_val_loss.to_bits());
        for (x, y) in a.curve.iter().zip(&b.curve) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        }
    }

    fn pretrain_checkpoint(encoder: EncoderSpec, stage: &str) -> Checkpoint {
        let spec = UnetSpec { encoder, use_skips: true };
        let mut net = UnetSsl::new(&spec, 77).unwrap();
        Checkpoint::capture(stage, &spec, 0, 1.0, "{}", &mut net)
    }

    #[test]
    fn encoder_mismatch_is_rejected() {
        let mut other = micro_encoder();
        other.stem_channels = 6;
        let ckpt = pretrain_checkpoint(other, "residual");
        let samples = separable_samples(3, 2);
        let (train, val) = samples.split_at(4);
        let err = finetune(train, val, Some(&ckpt), &micro_cfg(1, 1e-3, 0)).err().unwrap();
        assert!(
            matches!(err, Error::SpecHashMismatch { .. }),
            "expected a spec mismatch, got {err:?}"
        );
    }

    #[test]
    fn non_pretraining_checkpoint_is_rejected_as_init() {
        let ckpt = pretrain_checkpoint(micro_encoder(), "classifier");
        let samples = separable_samples(3, 2);
        let (train, val) = samples.split_at(4);
        let err = finetune(train, val, Some(&ckpt), &micro_cfg(1, 1e-3, 0)).err().unwrap();
        assert!(matches!(err, Error::State(_)), "expected a state error, got {err:?}");
    }

    #[test]
    fn pretrained_encoder_transfers_weights() {
        let ckpt = pretrain_checkpoint(micro_encoder(), "residual");
        let samples = separable_samples(3, 8);
        let (train, val) = samples.split_at(4);
        let out = finetune(train, val, Some(&ckpt), &micro_cfg(1, 1e-6, 1)).unwrap();
        assert!(out.restored_tensors > 0, "no encoder tensors restored");

        // The restored encoder must actually carry the checkpoint's weights:
        // a near-zero learning rate keeps them close, so fresh-init and
        // restored runs must diverge in their validation losses.
        let scratch = finetune(train, val, None, &micro_cfg(1, 1e-6, 1)).unwrap();
        assert_ne!(
            out.best_val_loss.to_bits(),
            scratch.best_val_loss.to_bits(),
            "restored encoder produced the same loss as a fresh one"
        );
    }

    #[test]
    fn evaluate_reports_consistent_outcome() {
        let samples = separable_samples(4, 21);
        let mut model = Classifier::new(&micro_classifier(), 3).unwrap();
        let out = evaluate(&mut model, &samples, 3).unwrap();
        assert_eq!(out.items_scored, samples.len());
        assert_eq!(out.ids.len(), samples.len());
        for (&s, &p) in out.scores.iter().zip(&out.predictions) {
            assert!((0.0..=1.0).contains(&s));
            assert_eq!(p, s > 0.5);
        }
        assert!(out.metrics.auroc.is_finite());
        assert!(evaluate(&mut model, &[], 3).is_err());
    }

    fn micro_split(samples: &[Sample], label_fractions: Vec<u32>, normals: Vec<u32>) -> SplitPlan {
        let metas: Vec<SampleMeta> = samples.iter().map(SampleMeta::from).collect();
        let cfg = SplitConfig {
            n_folds: 2,
            seed: 4,
            ratios: [3, 1, 1],
            label_fractions,
            normal_fractions: normals,
        };
        make_split(&metas, &cfg).unwrap()
    }

    #[test]
    fn label_sweep_covers_methods_and_skips_missing_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_dataset(&PhantomConfig {
            n_samples: 20,
            anomaly_fraction: 0.5,
            volume_size: 16,
            texture_noise_std: 0.02,
            seed: 31,
        })
        .unwrap();
        let plan = micro_split(&samples, vec![50, 100], vec![100]);
        let methods = vec![
            SweepMethod { name: "scratch".into(), checkpoints: None },
            SweepMethod {
                name: "ghost".into(),
                checkpoints: Some(vec![
                    dir.path().join("missing0.ckpt"),
                    dir.path().join("missing1.ckpt"),
                ]),
            },
        ];
        let mut base = micro_cfg(1, 1e-3, 7);
        base.batch_size = 4;
        let rows = run_label_fraction_sweep(
            &samples,
            &plan,
            &[0, 1],
            &methods,
            &[100, 50],
            &base,
            dir.path(),
        )
        .unwrap();

        let labels: Vec<(String, u32, SweepStatus)> =
            rows.iter().map(|r| (r.method.clone(), r.fraction, r.status.clone())).collect();
        assert_eq!(
            labels,
            vec![
                ("scratch".into(), 50, SweepStatus::Ok),
                ("scratch".into(), 100, SweepStatus::Ok),
                ("ghost".into(), 50, SweepStatus::SkippedMissingCheckpoint),
                ("ghost".into(), 100, SweepStatus::SkippedMissingCheckpoint),
            ]
        );
        for r in &rows {
            match r.status {
                SweepStatus::Ok => {
                    let rep = r.report.as_ref().unwrap();
                    assert_eq!(rep.auroc.n_folds, 2);
                }
                SweepStatus::SkippedMissingCheckpoint => assert!(r.report.is_none()),
            }
        }
        let csv = std::fs::read_to_string(dir.path().join("label_fraction_sweep.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + rows.len());
        assert!(csv.contains("ghost,50,skipped_missing_checkpoint"));
        assert!(dir.path().join("label_fraction_auroc.svg").exists());
        assert!(dir.path().join("label_fraction_auprc.svg").exists());
    }

    #[test]
    fn sweeps_demand_at_least_two_folds() {
        let samples = separable_samples(4, 2);
        let plan = micro_split(&samples, vec![100], vec![100]);
        let err = run_label_fraction_sweep(
            &samples,
            &plan,
            &[0],
            &[SweepMethod { name: "scratch".into(), checkpoints: None }],
            &[100],
            &micro_cfg(1, 1e-3, 0),
            std::env::temp_dir().as_path(),
        )
        .err()
        .unwrap();
        assert!(matches!(err, Error::Config(_)));

        // A method must bring exactly one checkpoint per fold.
        let err = run_label_fraction_sweep(
            &samples,
            &plan,
            &[0, 1],
            &[SweepMethod {
                name: "short".into(),
                checkpoints: Some(vec![PathBuf::from("only_one.ckpt")]),
            }],
            &[100],
            &micro_cfg(1, 1e-3, 0),
            std::env::temp_dir().as_path(),
        )
        .err()
        .unwrap();
        assert!(err.to_string().contains("1 checkpoints for 2 folds"), "{err}");
    }

    #[test]
    fn cae_sweep_produces_one_row_per_fraction() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_dataset(&PhantomConfig {
            n_samples: 16,
            anomaly_fraction: 0.5,
            volume_size: 16,
            texture_noise_std: 0.02,
            seed: 13,
        })
        .unwrap();
        let plan = micro_split(&samples, vec![100], vec![50, 100]);
        let cae = CaeHyper {
            spec: crate::models::CaeSpec {
                input_size: 16,
                channels: vec![4, 8],
                latent_dim: 8,
            },
            epochs: 1,
            warmup_epochs: 0,
            base_lr: 0.05,
            weight_decay: 0.0,
            batch_size: 4,
            seed: 5,
        };
        let pretrain = PretrainConfig {
            task: PretrainTask::Residual,
            loss: ReconLoss::BceLogits,
            unet: UnetSpec { encoder: micro_encoder(), use_skips: true },
            epochs: 1,
            warmup_epochs: 0,
            lr: 0.5,
            weight_decay: 0.0,
            batch_size: 4,
            dae_noise_mean: 0.0,
            dae_noise_std: 0.0,
            augmentation: AugmentationPolicy::disabled(),
            seed: 6,
        };
        let inputs = CaeSweepInputs {
            dataset: &samples,
            plan: &plan,
            cae,
            pretrain,
            finetune: micro_cfg(1, 1e-3, 8),
            label_fraction: 100,
        };
        let rows = run_cae_fraction_sweep(&inputs, &[100, 50], &[0, 1], dir.path()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].fraction, 50);
        assert_eq!(rows[1].fraction, 100);
        for r in &rows {
            assert_eq!(r.status, SweepStatus::Ok);
            let rep = r.report.as_ref().unwrap();
            assert_eq!(rep.auprc.per_fold.len(), 2);
        }
        assert!(dir.path().join("cae_fraction_sweep.csv").exists());
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut cfg = micro_cfg(1, 1e-3, 0);
        cfg.label_fraction = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = micro_cfg(1, 1e-3, 0);
        cfg.label_fraction = 101;
        assert!(cfg.validate().is_err());
        let mut cfg = micro_cfg(0, 1e-3, 0);
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        assert!(micro_cfg(1, 0.0, 0).validate().is_err());
    }
}
