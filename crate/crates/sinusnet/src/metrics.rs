//! Ranking and classification metrics with cross-fold aggregation.
//!
//! AUROC uses the average-rank formulation (ties contribute half), AUPRC
//! uses step interpolation over descending score thresholds with tied
//! scores collapsed into one threshold. Both are exact, not trapezoidal
//! approximations; the test suite checks them against brute-force oracles.

use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use crate::error::{Error, Result};

fn check_instance(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Metric("empty instance".into()));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Metric(format!("non-finite score {}", bad)));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(
            "instance needs both a positive and a negative example".into(),
        ));
    }
    Ok((n_pos, n_neg))
}

/// Area under the ROC curve via average ranks (exact under ties).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (n_pos, n_neg) = check_instance(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // average rank within each tie group, 1-based
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let np = n_pos as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Area under the precision-recall curve (average precision with step
/// interpolation, tie groups collapsed).
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (n_pos, _) = check_instance(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..j] {
            if labels[idx] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

/// F1 of the positive class; 0 when undefined (no true positives possible).
pub fn f1_score(predictions: &[bool], labels: &[bool]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Metric("empty instance".into()));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / denom as f64)
}

/// One evaluated fold.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub auroc: f64,
    pub auprc: f64,
    pub f1: f64,
}

/// Mean and Student-t 95% confidence interval over folds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    pub per_fold: Vec<f64>,
    pub mean: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
    pub n_folds: usize,
}

/// Aggregate one metric across folds.
///
/// The interval is `mean +/- t(0.975, n-1) * s / sqrt(n)` with the sample
/// standard deviation; an interval needs at least two folds.
pub fn aggregate_folds(values: &[f64]) -> Result<MetricSummary> {
    if values.len() < 2 {
        return Err(Error::Metric(format!(
            "aggregation needs at least 2 folds, got {}",
            values.len()
        )));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Metric(format!("non-finite fold value {}", bad)));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let t = statrs::distribution::StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::Metric(format!("t distribution: {}", e)))?
        .inverse_cdf(0.975);
    let half = t * sd / (n as f64).sqrt();
    Ok(MetricSummary {
        per_fold: values.to_vec(),
        mean,
        ci95_low: mean - half,
        ci95_high: mean + half,
        n_folds: n,
    })
}

/// Full evaluation report for one experiment across folds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub folds: Vec<FoldMetrics>,
    pub auroc: MetricSummary,
    pub auprc: MetricSummary,
    pub f1: MetricSummary,
}

impl MetricsReport {
    pub fn from_folds(folds: Vec<FoldMetrics>) -> Result<MetricsReport> {
        for (i, f) in folds.iter().enumerate() {
            for (name, v) in [("auroc", f.auroc), ("auprc", f.auprc), ("f1", f.f1)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Metric(format!("fold {i} {name} = {v} outside [0, 1]")));
                }
            }
        }
        let auroc = aggregate_folds(&folds.iter().map(|f| f.auroc).collect::<Vec<_>>())?;
        let auprc = aggregate_folds(&folds.iter().map(|f| f.auprc).collect::<Vec<_>>())?;
        let f1 = aggregate_folds(&folds.iter().map(|f| f.f1).collect::<Vec<_>>())?;
        Ok(MetricsReport { folds, auroc, auprc, f1 })
    }
}


#[cfg(test)]
mod tests {
    use super::oracles::{auprc_thresholds, auroc_pairwise};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_instance(rng: &mut ChaCha12Rng) -> (Vec<f64>, Vec<bool>) {
        loop {
            let n = rng.gen_range(2..=50);
            // draw from a small discrete set so ties are common
            let levels = rng.gen_range(2..=12);
            let scores: Vec<f64> =
                (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let pos = labels.iter().filter(|&&l| l).count();
            if pos > 0 && pos < n {
                return (scores, labels);
            }
        }
    }

    #[test]
    fn auroc_matches_pairwise_oracle_on_random_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let (scores, labels) = random_instance(&mut rng);
            let got = auroc(&scores, &labels).unwrap();
            let want = auroc_pairwise(&scores, &labels);
            assert!((got - want).abs() <= 1e-12, "{} vs {}", got, want);
        }
    }

    #[test]
    fn auprc_matches_threshold_oracle_on_random_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..2000 {
            let (scores, labels) = random_instance(&mut rng);
            let got = auprc(&scores, &labels).unwrap();
            let want = auprc_thresholds(&scores, &labels);
            assert!((got - want).abs() <= 1e-12, "{} vs {}", got, want);
        }
    }

    #[test]
    fn known_auroc_values() {
        let labels = vec![true, true, false, false];
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 1.0);
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5, 0.5, 0.5, 0.5], &labels).unwrap(), 0.5);
        let mixed = auroc(&[0.9, 0.7, 0.8, 0.6], &labels).unwrap();
        assert!((mixed - 0.75).abs() < 1e-15);
    }

    #[test]
    fn constant_scores_give_prevalence_auprc() {
        let labels = vec![true, false, false, true, false];
        let got = auprc(&[0.3; 5], &labels).unwrap();
        assert!((got - 0.4).abs() < 1e-15);
    }

    #[test]
    fn perfect_ranking_gives_unit_auprc() {
        let labels = vec![true, true, false, false];
        assert_eq!(auprc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 1.0);
    }

    #[test]
    fn f1_cases() {
        assert_eq!(f1_score(&[true, false], &[true, false]).unwrap(), 1.0);
        assert_eq!(f1_score(&[false, false], &[false, false]).unwrap(), 0.0);
        // tp=1 fp=1 fn=1 -> 2/(2+1+1)
        let got = f1_score(&[true, true, false], &[true, false, true]).unwrap();
        assert!((got - 0.5).abs() < 1e-15);
    }

    #[test]
    fn degenerate_instances_error() {
        assert!(auroc(&[0.5, 0.4], &[true, true]).is_err());
        assert!(auroc(&[0.5], &[true]).is_err());
        assert!(auroc(&[f64::NAN, 0.4], &[true, false]).is_err());
        assert!(auprc(&[0.5, 0.4], &[false, false]).is_err());
        assert!(auroc(&[0.5, 0.4, 0.3], &[true, false]).is_err());
    }

    #[test]
    fn fold_aggregation_uses_student_t() {
        let s = aggregate_folds(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!((s.mean - 3.0).abs() < 1e-15);
        // t(0.975, 4) = 2.7764..., s = sqrt(2.5)
        let half = 2.776445105 * 2.5f64.sqrt() / 5f64.sqrt();
        assert!((s.ci95_high - (3.0 + half)).abs() < 1e-6);
        assert!((s.ci95_low - (3.0 - half)).abs() < 1e-6);
        assert!(aggregate_folds(&[0.7]).is_err());
        assert!(aggregate_folds(&[]).is_err());
    }

    #[test]
    fn identical_folds_give_zero_width_interval() {
        let s = aggregate_folds(&[0.8, 0.8, 0.8]).unwrap();
        assert!((s.mean - 0.8).abs() < 1e-12);
        assert!((s.ci95_high - s.ci95_low).abs() < 1e-12);
        assert!(s.ci95_low <= s.mean && s.mean <= s.ci95_high);
    }

    #[test]
    fn out_of_range_fold_metric_is_rejected() {
        let folds = vec![
            FoldMetrics { auroc: 0.8, auprc: 1.2, f1: 0.6 },
            FoldMetrics { auroc: 0.9, auprc: 0.8, f1: 0.7 },
        ];
        assert!(MetricsReport::from_folds(folds).is_err());
    }

    #[test]
    fn report_aggregates_each_metric() {
        let folds = vec![
            FoldMetrics { auroc: 0.8, auprc: 0.7, f1: 0.6 },
            FoldMetrics { auroc: 0.9, auprc: 0.8, f1: 0.7 },
        ];
        let report = MetricsReport::from_folds(folds).unwrap();
        assert!((report.auroc.mean - 0.85).abs() < 1e-12);
        assert!((report.auprc.mean - 0.75).abs() < 1e-12);
        assert_eq!(report.f1.n_folds, 2);
    }
}
