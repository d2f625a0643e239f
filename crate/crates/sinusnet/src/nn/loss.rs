//! Reconstruction and classification losses with their gradients.
//!
//! Reconstruction targets live in `[0, 1]` and models emit logits, so the
//! logistic map is folded into each loss: the BCE variant uses the stable
//! logits formulation, and the L1/L2 variants compare `sigmoid(z)` to the
//! target. All losses are means over every element, and the returned
//! gradient is with respect to the logits.

use ndarray::{Array2, Array5};
use serde::{Deserialize, Serialize};

use super::act::sigmoid;

/// Which reconstruction loss to train with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconLoss {
    BceLogits,
    L1,
    L2,
}

impl ReconLoss {
    /// Mean loss and gradient w.r.t. logits `z` against target `t`.
    pub fn loss_and_grad(self, z: &Array5<f64>, t: &Array5<f64>) -> (f64, Array5<f64>) {
        assert_eq!(z.dim(), t.dim(), "loss shapes differ: {:?} vs {:?}", z.dim(), t.dim());
        let n = z.len() as f64;
        let mut grad = Array5::zeros(z.dim());
        let mut total = 0.0;
        match self {
            ReconLoss::BceLogits => {
                ndarray::Zip::from(&mut grad).and(z).and(t).for_each(|g, &zv, &tv| {
                    total += zv.max(0.0) - zv * tv + (-zv.abs()).exp().ln_1p();
                    *g = (sigmoid(zv) - tv) / n;
                });
            }
            ReconLoss::L1 => {
                ndarray::Zip::from(&mut grad).and(z).and(t).for_each(|g, &zv, &tv| {
                    let p = sigmoid(zv);
                    let diff = p - tv;
                    total += diff.abs();
                    *g = diff.signum() * p * (1.0 - p) / n;
                });
            }
            ReconLoss::L2 => {
                ndarray::Zip::from(&mut grad).and(z).and(t).for_each(|g, &zv, &tv| {
                    let p = sigmoid(zv);
                    let diff = p - tv;
                    total += diff * diff;
                    *g = 2.0 * diff * p * (1.0 - p) / n;
                });
            }
        }
        (total / n, grad)
    }

    /// Mean loss only, for validation passes.
    pub fn loss(self, z: &Array5<f64>, t: &Array5<f64>) -> f64 {
        self.loss_and_grad(z, t).0
    }
}

/// Mean softmax cross-entropy over a batch of class logits.
///
/// Returns the loss and the gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let (b, k) = logits.dim();
    assert_eq!(b, targets.len(), "batch size {} vs {} targets", b, targets.len());
    let mut grad = Array2::zeros((b, k));
    let mut total = 0.0;
    for (bi, &target) in targets.iter().enumerate() {
        assert!(target < k, "target {} out of range for {} classes", target, k);
        let row = logits.row(bi);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        let log_z = m + sum_exp.ln();
        total += log_z - row[target];
        for ki in 0..k {
            let p = (row[ki] - log_z).exp();
            grad[(bi, ki)] = (p - if ki == target { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    (total / b as f64, grad)
}

/// Softmax probabilities for one row of logits.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
