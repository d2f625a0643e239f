//! Learning-rate schedule: linear warmup into cosine annealing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup from 0 to `base_lr` over `warmup_epochs`, then cosine
/// annealing down to 0 at the final epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WarmupCosine {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl WarmupCosine {
    pub fn new(base_lr: f64, warmup_epochs: usize, total_epochs: usize) -> Result<Self> {
        if base_lr <= 0.0 || !base_lr.is_finite() {
            return Err(Error::Argument(format!("base_lr must be positive, got {}", base_lr)));
        }
        if total_epochs == 0 {
            return Err(Error::Argument("total_epochs must be >= 1".into()));
        }
        if warmup_epochs >= total_epochs {
            return Err(Error::Argument(format!(
                "warmup ({}) must be shorter than the schedule ({})",
                warmup_epochs, total_epochs
            )));
        }
        Ok(WarmupCosine { base_lr, warmup_epochs, total_epochs })
    }

    /// Learning rate for a 0-based epoch index.
    ///
    /// During warmup the rate is `base_lr * epoch / warmup_epochs` (0 at
    /// epoch 0); afterwards it follows half a cosine period, reaching
    /// `base_lr` at the end of warmup and 0 at the last epoch.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::Argument(format!(
                "epoch {} out of range for a {}-epoch schedule",
                epoch, self.total_epochs
            )));
        }
        if epoch < self.warmup_epochs {
            return Ok(self.base_lr * epoch as f64 / self.warmup_epochs as f64);
        }
        let span = (self.total_epochs - 1 - self.warmup_epochs).max(1) as f64;
        let t = (epoch - self.warmup_epochs) as f64 / span;
        Ok(self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}
