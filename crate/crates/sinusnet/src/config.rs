//! Experiment configuration: one TOML file drives every pipeline stage.
//!
//! The file mirrors the stage modules section by section (`[phantom]`,
//! `[split]`, `[cae]`, `[pretrain]`, `[finetune]`, `[sweep]`) plus paths
//! and a global seed. Stage seeds written in the file are folded together
//! with the global seed during [`ExperimentConfig::resolve`], so a single
//! `--seed` flag reseeds the whole experiment while leaving each stage's
//! stream independent. [`validate_config`] returns every rule violation
//! at once rather than stopping at the first.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::FinetuneConfig;
use crate::phantom::PhantomConfig;
use crate::seeding::derive2;
use crate::splits::SplitConfig;
use crate::ssl::PretrainConfig;
use crate::uad::{CaeHyper, ResidualPostprocess};

/// Where the pipeline reads and writes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory holding (or receiving) generated datasets.
    pub data_root: PathBuf,
    /// Directory receiving per-run artifact trees.
    pub output_root: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { data_root: PathBuf::from("data"), output_root: PathBuf::from("runs") }
    }
}

/// Fraction lists and method roster for the two experiment sweeps.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Label percentages for the fine-tuning sweep; must be a subset of the
    /// split plan's `label_fractions`.
    pub label_fractions: Vec<u32>,
    /// Autoencoder training-data percentages; subset of the split plan's
    /// `normal_fractions`.
    pub normal_fractions: Vec<u32>,
    /// Initializations compared in the label sweep. `scratch` means no
    /// pretraining; the rest name pretraining tasks.
    pub methods: Vec<String>,
    /// Label percentage used for fine-tuning inside the autoencoder sweep.
    pub cae_label_fraction: u32,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            label_fractions: vec![10, 20, 40, 60, 80, 100],
            normal_fractions: vec![20, 40, 60, 80, 100],
            methods: vec!["scratch".into(), "residual".into()],
            cae_label_fraction: 10,
        }
    }
}

/// Names of pretraining methods a sweep may reference, besides `scratch`.
pub const PRETRAIN_METHOD_NAMES: [&str; 3] = ["residual", "ae", "dae"];

/// Everything one experiment run needs, serializable as a TOML document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Global seed; folded into every stage seed by [`Self::resolve`].
    pub seed: u64,
    /// Cross-validation folds the pipeline trains and evaluates.
    pub folds: Vec<usize>,
    pub paths: PathsConfig,
    pub phantom: PhantomConfig,
    pub split: SplitConfig,
    pub cae: CaeHyper,
    /// How raw reconstruction residuals are post-processed into targets.
    pub residuals: ResidualPostprocess,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            folds: vec![0, 1, 2, 3, 4],
            paths: PathsConfig::default(),
            phantom: PhantomConfig::default(),
            split: SplitConfig::default(),
            cae: CaeHyper::default(),
            residuals: ResidualPostprocess::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

const SALT_PHANTOM: u64 = 0xC0F_01;
const SALT_SPLIT: u64 = 0xC0F_02;
const SALT_CAE: u64 = 0xC0F_03;
const SALT_PRETRAIN: u64 = 0xC0F_04;
const SALT_FINETUNE: u64 = 0xC0F_05;

impl ExperimentConfig {
    /// Parse a TOML document.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config does not parse: {e}")))
    }

    /// Serialize back to TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Fold the global seed (optionally overridden) into each stage seed.
    ///
    /// The result is what gets frozen beside a run's artifacts: every seed
    /// in it is the one actually used. Derived seeds are truncated to 63
    /// bits so the frozen file stays representable as TOML integers.
    pub fn resolve(&self, seed_override: Option<u64>) -> ExperimentConfig {
        let stage = |salt: u64, local: u64, global: u64| derive2(global, salt, local) & (u64::MAX >> 1);
        let mut cfg = self.clone();
        if let Some(s) = seed_override {
            cfg.seed = s & (u64::MAX >> 1);
        }
        cfg.phantom.seed = stage(SALT_PHANTOM, self.phantom.seed, cfg.seed);
        cfg.split.seed = stage(SALT_SPLIT, self.split.seed, cfg.seed);
        cfg.cae.seed = stage(SALT_CAE, self.cae.seed, cfg.seed);
        cfg.pretrain.seed = stage(SALT_PRETRAIN, self.pretrain.seed, cfg.seed);
        cfg.finetune.seed = stage(SALT_FINETUNE, self.finetune.seed, cfg.seed);
        cfg
    }

    /// Hex digest of the serialized config; runs with equal digests produce
    /// identical artifacts.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        let d = hasher.finalize();
        d.iter().take(8).map(|b| format!("{:02x}", b)).collect()
    }
}

/// Read and parse a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// One violated configuration rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    /// Dotted path of the offending field or section.
    pub field: String,
    /// The rule it breaks, with the offending values.
    pub rule: String,
}

impl Diagnostic {
    fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Diagnostic { field: field.into(), rule: rule.into() }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

fn fraction_subset(
    out: &mut Vec<Diagnostic>,
    field: &str,
    chosen: &[u32],
    allowed: &[u32],
    allowed_field: &str,
) {
    for &p in chosen {
        if !allowed.contains(&p) {
            out.push(Diagnostic::new(
                field,
                format!("{p}% is not in {allowed_field} (allowed: {allowed:?})"),
            ));
        }
    }
}

/// Check every module-level rule and each cross-section constraint.
///
/// Returns an empty list exactly when the config is runnable. Path
/// existence is deliberately not checked here; it is a run-time concern.
pub fn validate_config(cfg: &ExperimentConfig) -> Vec<Diagnostic> {
    let mut out = Vec::new();

    if cfg.paths.data_root.as_os_str().is_empty() {
        out.push(Diagnostic::new("paths.data_root", "must not be empty"));
    }
    if cfg.paths.output_root.as_os_str().is_empty() {
        out.push(Diagnostic::new("paths.output_root", "must not be empty"));
    }

    for (section, result) in [
        ("phantom", cfg.phantom.validate()),
        ("split", cfg.split.validate()),
        ("cae", cfg.cae.validate()),
        ("pretrain", cfg.pretrain.validate()),
        ("finetune", cfg.finetune.validate()),
    ] {
        if let Err(e) = result {
            out.push(Diagnostic::new(section, e.to_string()));
        }
    }

    if let ResidualPostprocess::Median { kernel } = cfg.residuals {
        if kernel == 0 || kernel % 2 == 0 {
            out.push(Diagnostic::new(
                "residuals.kernel",
                format!("median kernel must be odd and positive, got {kernel}"),
            ));
        }
    }

    if cfg.folds.len() < 2 {
        out.push(Diagnostic::new(
            "folds",
            "metric aggregation needs at least 2 folds",
        ));
    }
    let mut seen = std::collections::BTreeSet::new();
    for &f in &cfg.folds {
        if f >= cfg.split.n_folds {
            out.push(Diagnostic::new(
                "folds",
                format!("fold {f} is out of range for split.n_folds = {}", cfg.split.n_folds),
            ));
        }
        if !seen.insert(f) {
            out.push(Diagnostic::new("folds", format!("fold {f} is listed twice")));
        }
    }

    if !cfg.split.label_fractions.contains(&cfg.finetune.label_fraction) {
        out.push(Diagnostic::new(
            "finetune.label_fraction",
            format!(
                "{}% is not in split.label_fractions (allowed: {:?})",
                cfg.finetune.label_fraction, cfg.split.label_fractions
            ),
        ));
    }
    fraction_subset(
        &mut out,
        "sweep.label_fractions",
        &cfg.sweep.label_fractions,
        &cfg.split.label_fractions,
        "split.label_fractions",
    );
    fraction_subset(
        &mut out,
        "sweep.normal_fractions",
        &cfg.sweep.normal_fractions,
        &cfg.split.normal_fractions,
        "split.normal_fractions",
    );
    if !cfg.split.label_fractions.contains(&cfg.sweep.cae_label_fraction) {
        out.push(Diagnostic::new(
            "sweep.cae_label_fraction",
            format!(
                "{}% is not in split.label_fractions (allowed: {:?})",
                cfg.sweep.cae_label_fraction, cfg.split.label_fractions
            ),
        ));
    }

    if cfg.sweep.methods.is_empty() {
        out.push(Diagnostic::new("sweep.methods", "must name at least one method"));
    }
    for m in &cfg.sweep.methods {
        if m != "scratch" && !PRETRAIN_METHOD_NAMES.contains(&m.as_str()) {
            out.push(Diagnostic::new(
                "sweep.methods",
                format!("unknown method '{m}' (known: scratch, {})", PRETRAIN_METHOD_NAMES.join(", ")),
            ));
        }
    }
    if cfg.sweep.methods.len()
        != cfg.sweep.methods.iter().collect::<std::collections::BTreeSet<_>>().len()
    {
        out.push(Diagnostic::new("sweep.methods", "methods must be distinct"));
    }

    let sizes = [
        ("phantom.volume_size", cfg.phantom.volume_size),
        ("cae.spec.input_size", cfg.cae.spec.input_size),
        ("pretrain.unet.encoder.input_size", cfg.pretrain.unet.encoder.input_size),
        ("finetune.classifier.encoder.input_size", cfg.finetune.classifier.encoder.input_size),
    ];
    for (name, size) in &sizes[1..] {
        if *size != sizes[0].1 {
            out.push(Diagnostic::new(
                *name,
                format!("{size} does not match {} = {}", sizes[0].0, sizes[0].1),
            ));
        }
    }

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_clean() {
        let diags = validate_config(&ExperimentConfig::default());
        assert!(diags.is_empty(), "unexpected diagnostics: {diags:?}");
    }

    #[test]
    fn round_trips_through_toml_losslessly() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        let a = serde_json::to_value(&cfg).unwrap();
        let b = serde_json::to_value(&back).unwrap();
        assert_eq!(a, b);
        assert_eq!(cfg.digest(), back.digest());
    }

    #[test]
    fn warmup_past_run_end_names_both_fields() {
        let mut cfg = ExperimentConfig::default();
        cfg.pretrain.warmup_epochs = cfg.pretrain.epochs + 5;
        let diags = validate_config(&cfg);
        let d = diags.iter().find(|d| d.field == "pretrain").expect("pretrain diagnostic");
        assert!(d.rule.contains("warmup") && d.rule.contains("epochs"), "rule: {}", d.rule);
    }

    #[test]
    fn out_of_set_fraction_lists_the_allowed_set() {
        let mut cfg = ExperimentConfig::default();
        cfg.finetune.label_fraction = 30;
        let diags = validate_config(&cfg);
        let d = diags
            .iter()
            .find(|d| d.field == "finetune.label_fraction")
            .expect("fraction diagnostic");
        assert!(d.rule.contains("30") && d.rule.contains("[10, 20, 40, 60, 80, 100]"),
            "rule: {}", d.rule);
    }

    #[test]
    fn fold_list_rules_are_enforced() {
        let mut cfg = ExperimentConfig::default();
        cfg.folds = vec![0];
        assert!(validate_config(&cfg).iter().any(|d| d.field == "folds"));
        cfg.folds = vec![0, 0];
        assert!(validate_config(&cfg).iter().any(|d| d.rule.contains("twice")));
        cfg.folds = vec![0, 9];
        assert!(validate_config(&cfg).iter().any(|d| d.rule.contains("out of range")));
    }

    #[test]
    fn mismatched_volume_sizes_are_flagged() {
        let mut cfg = ExperimentConfig::default();
        cfg.phantom.volume_size = 32;
        let diags = validate_config(&cfg);
        assert!(diags.iter().any(|d| d.field == "cae.spec.input_size"));
        assert!(diags.iter().any(|d| d.field == "finetune.classifier.encoder.input_size"));
    }

    #[test]
    fn unknown_keys_and_bad_types_fail_to_parse() {
        let err = ExperimentConfig::from_toml("sneed = 3").err().unwrap();
        assert!(matches!(err, Error::Config(_)));
        let err = ExperimentConfig::from_toml("[phantom]\nn_samples = \"many\"")
            .err()
            .unwrap();
        let msg = err.to_string();
        assert!(msg.contains("line") || msg.contains('|'), "no location in: {msg}");
    }

    #[test]
    fn resolve_folds_global_seed_into_stage_seeds() {
        let cfg = ExperimentConfig::default();
        let a = cfg.resolve(None);
        let b = cfg.resolve(None);
        assert_eq!(a.phantom.seed, b.phantom.seed);
        let c = cfg.resolve(Some(1));
        assert_eq!(c.seed, 1);
        assert_ne!(a.phantom.seed, c.phantom.seed);
        assert_ne!(a.split.seed, c.split.seed);
        assert_ne!(a.cae.seed, c.cae.seed);
        assert_ne!(a.pretrain.seed, c.pretrain.seed);
        assert_ne!(a.finetune.seed, c.finetune.seed);
        // Stage streams stay distinct from one another under any global seed.
        assert_ne!(c.phantom.seed, c.split.seed);
        // Resolution is idempotent in shape: a resolved config still parses
        // and re-resolves deterministically.
        let frozen = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(frozen.phantom.seed, c.phantom.seed);
    }

    #[test]
    fn even_median_kernel_is_flagged() {
        let mut cfg = ExperimentConfig::default();
        cfg.residuals = ResidualPostprocess::Median { kernel: 4 };
        assert!(validate_config(&cfg).iter().any(|d| d.field == "residuals.kernel"));
        cfg.residuals = ResidualPostprocess::None;
        assert!(validate_config(&cfg).is_empty());
        // The tagged enum survives the TOML round trip.
        cfg.residuals = ResidualPostprocess::Median { kernel: 3 };
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back.residuals, ResidualPostprocess::Median { kernel: 3 });
    }

    #[test]
    fn sweep_method_roster_is_checked() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.methods = vec!["scratch".into(), "simclr".into()];
        assert!(validate_config(&cfg).iter().any(|d| d.rule.contains("simclr")));
        cfg.sweep.methods = vec!["residual".into(), "residual".into()];
        assert!(validate_config(&cfg).iter().any(|d| d.rule.contains("distinct")));
        cfg.sweep.methods = vec![];
        assert!(validate_config(&cfg).iter().any(|d| d.field == "sweep.methods"));
    }

    /// The checked-in config files must stay in lockstep with the code:
    /// `default.toml` is exactly the built-in defaults, and both files
    /// validate clean.
    #[test]
    fn checked_in_configs_parse_and_validate() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let default_text = fs::read_to_string(root.join("default.toml")).unwrap();
        let default_cfg = ExperimentConfig::from_toml(&default_text).unwrap();
        assert_eq!(
            serde_json::to_value(&default_cfg).unwrap(),
            serde_json::to_value(ExperimentConfig::default()).unwrap(),
            "configs/default.toml drifted from ExperimentConfig::default()"
        );
        assert!(validate_config(&default_cfg).is_empty());

        let smoke_text = fs::read_to_string(root.join("smoke.toml")).unwrap();
        let smoke_cfg = ExperimentConfig::from_toml(&smoke_text).unwrap();
        let diags = validate_config(&smoke_cfg);
        assert!(diags.is_empty(), "smoke config diagnostics: {diags:?}");
        assert_eq!(smoke_cfg.phantom.volume_size, 16);
        assert!(smoke_cfg.folds.len() >= 2);
    }
}

