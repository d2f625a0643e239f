//! Seeded parameter initialization.

use ndarray::ArrayD;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// Kaiming-style normal init: std = sqrt(2 / fan_in).
pub fn kaiming_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha12Rng) -> ArrayD<f64> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let mut w = ArrayD::zeros(ndarray::IxDyn(shape));
    for v in w.iter_mut() {
        let n: f64 = StandardNormal.sample(rng);
        *v = std * n;
    }
    w
}
