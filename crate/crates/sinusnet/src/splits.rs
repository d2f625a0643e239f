//! Patient-level dataset splits with stratification and nested label
//! fractions.
//!
//! Splitting operates on sample metadata only. Both sides of a patient
//! always land in the same partition, so no anatomy leaks between train,
//! validation, and test. Patients are stratified by their per-side label
//! pattern and apportioned to the three partitions with the largest
//! remainder method, which reproduces the target volume proportions
//! exactly when the cohort composition allows it and within one patient
//! per stratum otherwise.
//!
//! Label-fraction subsets are nested: the list for a smaller fraction is
//! always a subset of the list for a larger one, so low-label experiments
//! see a strict subset of the data the high-label experiments see.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{ManifestEntry, Sample, SampleLabel};
use crate::seeding;

/// Sample metadata the splitter needs; volumes are never touched.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub patient: String,
    pub label: SampleLabel,
}

impl From<&Sample> for SampleMeta {
    fn from(s: &Sample) -> Self {
        SampleMeta { id: s.id.clone(), patient: s.patient.clone(), label: s.label }
    }
}

impl From<&ManifestEntry> for SampleMeta {
    fn from(e: &ManifestEntry) -> Self {
        SampleMeta { id: e.id.clone(), patient: e.patient.clone(), label: e.label }
    }
}

/// Split configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub n_folds: usize,
    pub seed: u64,
    /// Integer weights for train/val/test partition sizes.
    pub ratios: [u64; 3],
    /// Labelled-set percentages for the fine-tuning sweep.
    pub label_fractions: Vec<u32>,
    /// Normal-only percentages for the pretraining-data sweep.
    pub normal_fractions: Vec<u32>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            n_folds: 5,
            seed: 0,
            ratios: [708, 176, 380],
            label_fractions: vec![10, 20, 40, 60, 80, 100],
            normal_fractions: vec![20, 40, 60, 80, 100],
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_folds == 0 {
            return Err(Error::Config("n_folds must be >= 1".into()));
        }
        if self.ratios.iter().sum::<u64>() == 0 {
            return Err(Error::Config("split ratios must not all be zero".into()));
        }
        for list in [&self.label_fractions, &self.normal_fractions] {
            for &p in list {
                if p == 0 || p > 100 {
                    return Err(Error::Config(format!("fraction {}% is outside (0, 100]", p)));
                }
            }
            let mut sorted = list.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != list.len() {
                return Err(Error::Config("fraction lists must not contain duplicates".into()));
            }
        }
        Ok(())
    }
}

/// One fold: partition membership plus nested fraction subsets of train.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// Percent -> nested subset of `train`, class-stratified.
    pub label_fraction_lists: BTreeMap<u32, Vec<String>>,
    /// Percent -> nested subset of the normal samples in `train`.
    pub normal_fraction_lists: BTreeMap<u32, Vec<String>>,
}

/// All folds produced from one cohort and config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitPlan {
    pub config: SplitConfig,
    pub folds: Vec<FoldSplit>,
}

impl SplitPlan {
    pub fn fold(&self, idx: usize) -> Result<&FoldSplit> {
        self.folds.get(idx).ok_or_else(|| {
            Error::Split(format!("fold {} out of range ({} folds)", idx, self.folds.len()))
        })
    }

    /// Labelled training subset for a percentage from the configured list.
    pub fn take_fraction(&self, fold: usize, pct: u32) -> Result<&[String]> {
        let f = self.fold(fold)?;
        f.label_fraction_lists
            .get(&pct)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Split(format!("{}% is not a configured label fraction", pct)))
    }

    /// Normal-only training subset for a percentage from the configured list.
    pub fn take_normal_fraction(&self, fold: usize, pct: u32) -> Result<&[String]> {
        let f = self.fold(fold)?;
        f.normal_fraction_lists
            .get(&pct)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Split(format!("{}% is not a configured normal fraction", pct)))
    }
}

/// Round-half-up percentage of `n`, in integer arithmetic.
pub fn percent_of(pct: u32, n: usize) -> usize {
    ((pct as u64 * n as u64 + 50) / 100) as usize
}

/// Largest-remainder apportionment of `n` items into parts proportional to
/// `weights`. Ties go to the earlier part.
fn apportion(n: u64, weights: [u64; 3]) -> [u64; 3] {
    let den: u64 = weights.iter().sum();
    let mut floors = [0u64; 3];
    let mut rems = [0u64; 3];
    for i in 0..3 {
        let num = n * weights[i];
        floors[i] = num / den;
        rems[i] = num % den;
    }
    let mut left = n - floors.iter().sum::<u64>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
    for &i in &order {
        if left == 0 {
            break;
        }
        floors[i] += 1;
        left -= 1;
    }
    floors
}

struct Patient {
    samples: Vec<SampleMeta>,
    stratum: (usize, usize),
}

fn group_patients(samples: &[SampleMeta]) -> Result<Vec<Patient>> {
    let mut seen_ids = BTreeSet::new();
    for s in samples {
        if !seen_ids.insert(s.id.as_str()) {
            return Err(Error::Split(format!("duplicate sample id {}", s.id)));
        }
    }
    let mut by_patient: BTreeMap<&str, Vec<&SampleMeta>> = BTreeMap::new();
    for s in samples {
        by_patient.entry(s.patient.as_str()).or_default().push(s);
    }
    Ok(by_patient
        .into_values()
        .map(|members| {
            let n_normal = members.iter().filter(|m| m.label == SampleLabel::Normal).count();
            let n_anom = members.len() - n_normal;
            Patient {
                samples: members.into_iter().cloned().collect(),
                stratum: (n_normal, n_anom),
            }
        })
        .collect())
}

/// Build nested class-stratified subsets of `pool` for each percentage.
///
/// Walks one seeded shuffle of the pool; a sample is taken while its class
/// quota (round-half-up of pct times the class size) is unmet. Because
/// quotas grow monotonically with pct, smaller lists are subsets of larger
/// ones by construction.
fn nested_fraction_lists(
    pool: &[SampleMeta],
    fractions: &[u32],
    seed: u64,
) -> BTreeMap<u32, Vec<String>> {
    let mut class_sizes: BTreeMap<bool, usize> = BTreeMap::new();
    for s in pool {
        *class_sizes.entry(s.label == SampleLabel::Anomalous).or_insert(0) += 1;
    }
    let mut order: Vec<&SampleMeta> = pool.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    order.shuffle(&mut ChaCha12Rng::seed_from_u64(seed));
    let mut out = BTreeMap::new();
    for &pct in fractions {
        let quotas: BTreeMap<bool, usize> =
            class_sizes.iter().map(|(&c, &n)| (c, percent_of(pct, n))).collect();
        let mut counts: BTreeMap<bool, usize> = BTreeMap::new();
        let mut list = Vec::new();
        for s in &order {
            let class = s.label == SampleLabel::Anomalous;
            let taken = counts.entry(class).or_insert(0);
            if *taken < quotas[&class] {
                *taken += 1;
                list.push(s.id.clone());
            }
        }
        out.insert(pct, list);
    }
    out
}

/// Build the split plan for a cohort.
///
/// Each fold draws its own patient shuffle from the config seed, then
/// assigns whole patients to train/val/test per stratum with largest
/// remainder apportionment toward `config.ratios`.
pub fn make_split(samples: &[SampleMeta], config: &SplitConfig) -> Result<SplitPlan> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Split("cannot split an empty cohort".into()));
    }
    let patients = group_patients(samples)?;
    let mut strata: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, p) in patients.iter().enumerate() {
        strata.entry(p.stratum).or_default().push(i);
    }

    let mut folds = Vec::with_capacity(config.n_folds);
    for fold in 0..config.n_folds {
        let mut parts: [Vec<&Patient>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (stratum, members) in &strata {
            let mut members: Vec<usize> = members.clone();
            let shuffle_seed = seeding::derive2(
                config.seed,
                fold as u64,
                (stratum.0 as u64) << 32 | stratum.1 as u64,
            );
            members.shuffle(&mut ChaCha12Rng::seed_from_u64(shuffle_seed));
            let counts = apportion(members.len() as u64, config.ratios);
            let mut cursor = 0usize;
            for (part, &take) in parts.iter_mut().zip(&counts) {
                for &idx in members.iter().skip(cursor).take(take as usize) {
                    part.push(&patients[idx]);
                }
                cursor += take as usize;
            }
        }
        let collect = |part: &[&Patient]| -> Vec<String> {
            let mut ids: Vec<String> =
                part.iter().flat_map(|p| p.samples.iter().map(|s| s.id.clone())).collect();
            ids.sort();
            ids
        };
        let train_meta: Vec<SampleMeta> =
            parts[0].iter().flat_map(|p| p.samples.iter().cloned()).collect();
        let normal_meta: Vec<SampleMeta> = train_meta
            .iter()
            .filter(|s| s.label == SampleLabel::Normal)
            .cloned()
            .collect();
        let label_fraction_lists = nested_fraction_lists(
            &train_meta,
            &config.label_fractions,
            seeding::derive2(config.seed, fold as u64, 0xF1),
        );
        let normal_fraction_lists = nested_fraction_lists(
            &normal_meta,
            &config.normal_fractions,
            seeding::derive2(config.seed, fold as u64, 0xF2),
        );
        folds.push(FoldSplit {
            train: collect(&parts[0]),
            val: collect(&parts[1]),
            test: collect(&parts[2]),
            label_fraction_lists,
            normal_fraction_lists,
        });
    }
    Ok(SplitPlan { config: config.clone(), folds })
}

pub fn save_split(path: &Path, plan: &SplitPlan) -> Result<()> {
    let json = serde_json::to_string_pretty(plan)
        .map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_split(path: &Path) -> Result<SplitPlan> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })
}


#[cfg(test)]
mod tests {
    use super::testutil::cohort;
    use super::*;

    fn label_of(samples: &[SampleMeta], id: &str) -> SampleLabel {
        samples.iter().find(|s| s.id == id).unwrap().label
    }

    fn count_normal(samples: &[SampleMeta], ids: &[String]) -> usize {
        ids.iter().filter(|id| label_of(samples, id) == SampleLabel::Normal).count()
    }

    #[test]
    fn reference_cohort_hits_target_volume_counts() {
        // 489 + 286 + 292 patients give 1264 normal and 870 anomalous sides;
        // the default ratios must recover 708/176/380 normals exactly
        let samples = cohort(489, 286, 292);
        let plan = make_split(&samples, &SplitConfig::default()).unwrap();
        assert_eq!(plan.folds.len(), 5);
        for fold in &plan.folds {
            assert_eq!(count_normal(&samples, &fold.train), 708);
            assert_eq!(count_normal(&samples, &fold.val), 176);
            assert_eq!(count_normal(&samples, &fold.test), 380);
            let total = fold.train.len() + fold.val.len() + fold.test.len();
            assert_eq!(total, samples.len());
        }
    }

    #[test]
    fn no_patient_spans_partitions() {
        let samples = cohort(40, 25, 20);
        let plan = make_split(&samples, &SplitConfig { n_folds: 3, ..Default::default() }).unwrap();
        for fold in &plan.folds {
            let patient_of = |id: &String| id[..5].to_string();
            let train: BTreeSet<String> = fold.train.iter().map(patient_of).collect();
            let val: BTreeSet<String> = fold.val.iter().map(patient_of).collect();
            let test: BTreeSet<String> = fold.test.iter().map(patient_of).collect();
            assert!(train.is_disjoint(&val));
            assert!(train.is_disjoint(&test));
            assert!(val.is_disjoint(&test));
        }
    }

    #[test]
    fn folds_differ_but_runs_repeat() {
        let samples = cohort(40, 25, 20);
        let cfg = SplitConfig { n_folds: 3, seed: 7, ..Default::default() };
        let a = make_split(&samples, &cfg).unwrap();
        let b = make_split(&samples, &cfg).unwrap();
        for (fa, fb) in a.folds.iter().zip(&b.folds) {
            assert_eq!(fa.train, fb.train);
            assert_eq!(fa.val, fb.val);
            assert_eq!(fa.test, fb.test);
            assert_eq!(fa.label_fraction_lists, fb.label_fraction_lists);
        }
        assert_ne!(a.folds[0].train, a.folds[1].train);
    }

    #[test]
    fn input_order_does_not_change_the_plan() {
        let samples = cohort(30, 20, 10);
        let mut reversed = samples.clone();
        reversed.reverse();
        let cfg = SplitConfig { n_folds: 2, seed: 3, ..Default::default() };
        let a = make_split(&samples, &cfg).unwrap();
        let b = make_split(&reversed, &cfg).unwrap();
        for (fa, fb) in a.folds.iter().zip(&b.folds) {
            assert_eq!(fa.train, fb.train);
            assert_eq!(fa.label_fraction_lists, fb.label_fraction_lists);
        }
    }

    #[test]
    fn label_fractions_have_expected_sizes() {
        let samples = cohort(489, 286, 292);
        let plan = make_split(&samples, &SplitConfig { n_folds: 1, ..Default::default() }).unwrap();
        let fold = &plan.folds[0];
        let n_train_normal = count_normal(&samples, &fold.train);
        let n_train_anom = fold.train.len() - n_train_normal;
        assert_eq!(n_train_normal, 708);
        let ten = plan.take_fraction(0, 10).unwrap();
        assert_eq!(count_normal(&samples, &ten.to_vec()), 71);
        assert_eq!(ten.len() - 71, percent_of(10, n_train_anom));
        let twenty = plan.take_fraction(0, 20).unwrap();
        assert_eq!(count_normal(&samples, &twenty.to_vec()), 142);
        let full = plan.take_fraction(0, 100).unwrap();
        assert_eq!(full.len(), fold.train.len());
    }

    #[test]
    fn fraction_lists_are_nested() {
        let samples = cohort(60, 40, 30);
        let plan = make_split(&samples, &SplitConfig { n_folds: 2, ..Default::default() }).unwrap();
        for fold in 0..2 {
            let mut prev: BTreeSet<String> = BTreeSet::new();
            for &pct in &plan.config.label_fractions {
                let cur: BTreeSet<String> =
                    plan.take_fraction(fold, pct).unwrap().iter().cloned().collect();
                assert!(prev.is_subset(&cur), "{}% not nested in larger fraction", pct);
                prev = cur;
            }
        }
    }

    #[test]
    fn normal_fractions_contain_only_normals() {
        let samples = cohort(489, 286, 292);
        let plan = make_split(&samples, &SplitConfig { n_folds: 1, ..Default::default() }).unwrap();
        let twenty = plan.take_normal_fraction(0, 20).unwrap();
        assert_eq!(twenty.len(), 142);
        assert!(twenty
            .iter()
            .all(|id| label_of(&samples, id) == SampleLabel::Normal));
        let full = plan.take_normal_fraction(0, 100).unwrap();
        assert_eq!(full.len(), 708);
    }

    #[test]
    fn unknown_fraction_is_an_error() {
        let samples = cohort(10, 5, 5);
        let plan = make_split(&samples, &SplitConfig { n_folds: 1, ..Default::default() }).unwrap();
        assert!(plan.take_fraction(0, 33).is_err());
        assert!(plan.take_fraction(5, 10).is_err());
    }

    #[test]
    fn stratification_is_within_one_patient_per_stratum() {
        let cfg = SplitConfig { n_folds: 2, seed: 11, ..Default::default() };
        for (nn, na, aa) in [(37, 23, 19), (101, 53, 7), (12, 0, 9)] {
            let samples = cohort(nn, na, aa);
            let plan = make_split(&samples, &cfg).unwrap();
            let den: u64 = cfg.ratios.iter().sum();
            for fold in &plan.folds {
                for (stratum_n, part, w) in [
                    (nn, &fold.train, cfg.ratios[0]),
                    (nn, &fold.val, cfg.ratios[1]),
                    (nn, &fold.test, cfg.ratios[2]),
                ] {
                    // both-normal patients contribute two normal samples each
                    let ids: BTreeSet<&str> = part.iter().map(|s| s.as_str()).collect();
                    let got = (0..stratum_n)
                        .filter(|i| ids.contains(format!("p{:04}_L", i).as_str()))
                        .count() as f64;
                    let exact = stratum_n as f64 * w as f64 / den as f64;
                    assert!(
                        (got - exact).abs() < 1.0 + 1e-9,
                        "stratum size {} part weight {}: got {} want {}",
                        stratum_n,
                        w,
                        got,
                        exact
                    );
                }
            }
        }
    }

    #[test]
    fn duplicate_sample_ids_are_rejected() {
        let mut samples = cohort(5, 0, 0);
        samples.push(samples[0].clone());
        assert!(make_split(&samples, &SplitConfig::default()).is_err());
    }

    #[test]
    fn plan_roundtrips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let samples = cohort(20, 10, 10);
        let plan = make_split(&samples, &SplitConfig { n_folds: 2, ..Default::default() }).unwrap();
        let path = dir.path().join("split.json");
        save_split(&path, &plan).unwrap();
        let loaded = load_split(&path).unwrap();
        assert_eq!(loaded.folds.len(), plan.folds.len());
        assert_eq!(loaded.folds[0].train, plan.folds[0].train);
        assert_eq!(loaded.folds[1].normal_fraction_lists, plan.folds[1].normal_fraction_lists);
    }
}
