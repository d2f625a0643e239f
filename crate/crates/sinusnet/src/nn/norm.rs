//! Batch normalization over 5D activations.

use ndarray::{Array1, Array5, ArrayD, Axis};

use super::param::{Block, Param};

pub struct BatchNorm3d {
    pub gamma: Param,
    pub beta: Param,
    /// Running statistics, stored dynamic-rank so checkpoints can visit
    /// them uniformly with parameters.
    running_mean: ArrayD<f64>,
    running_var: ArrayD<f64>,
    name: String,
    c: usize,
    momentum: f64,
    eps: f64,
    cache: Option<BnCache>,
}

struct BnCache {
    xhat: Array5<f64>,
    inv_std: Array1<f64>,
    train: bool,
}

impl BatchNorm3d {
    pub fn new(name: &str, c: usize) -> Self {
        BatchNorm3d {
            gamma: Param::new(format!("{}.gamma", name), ArrayD::ones(ndarray::IxDyn(&[c])), false),
            beta: Param::new(format!("{}.beta", name), ArrayD::zeros(ndarray::IxDyn(&[c])), false),
            running_mean: ArrayD::zeros(ndarray::IxDyn(&[c])),
            running_var: ArrayD::ones(ndarray::IxDyn(&[c])),
            name: name.to_string(),
            c,
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array5<f64>, train: bool) -> Array5<f64> {
        let (b, c, d, h, w) = x.dim();
        assert_eq!(c, self.c, "batchnorm {} expects {} channels, got {}", self.name, self.c, c);
        let n = (b * d * h * w) as f64;
        let mut y = Array5::zeros((b, c, d, h, w));
        let mut xhat = Array5::zeros((b, c, d, h, w));
        let mut inv_std = Array1::zeros(c);
        for ci in 0..c {
            let xc = x.index_axis(Axis(1), ci);
            let (mean, var) = if train {
                let mean = xc.sum() / n;
                let var = xc.mapv(|v| (v - mean) * (v - mean)).sum() / n;
                self.running_mean[ci] =
                    (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean;
                self.running_var[ci] =
                    (1.0 - self.momentum) * self.running_var[ci] + self.momentum * var;
                (mean, var)
            } else {
                (self.running_mean[ci], self.running_var[ci])
            };
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ci] = istd;
            let g = self.gamma.w[ci];
            let bta = self.beta.w[ci];
            let mut xhat_c = xhat.index_axis_mut(Axis(1), ci);
            let mut y_c = y.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut xhat_c).and(&mut y_c).and(&xc).for_each(|xh, yv, &xv| {
                *xh = (xv - mean) * istd;
                *yv = g * *xh + bta;
            });
        }
        self.cache = Some(BnCache { xhat, inv_std, train });
        y
    }

    pub fn backward(&mut self, dy: &Array5<f64>) -> Array5<f64> {
        let cache = self.cache.take().expect("batchnorm backward without cached forward");
        let (b, c, d, h, w) = dy.dim();
        let n = (b * d * h * w) as f64;
        let mut dx = Array5::zeros((b, c, d, h, w));
        for ci in 0..c {
            let dyc = dy.index_axis(Axis(1), ci);
            let xhat_c = cache.xhat.index_axis(Axis(1), ci);
            let sum_dy = dyc.sum();
            let sum_dy_xhat = (&dyc * &xhat_c).sum();
            self.beta.g[ci] += sum_dy;
            self.gamma.g[ci] += sum_dy_xhat;
            let g = self.gamma.w[ci];
            let istd = cache.inv_std[ci];
            let mut dxc = dx.index_axis_mut(Axis(1), ci);
            if cache.train {
                let m_dy = sum_dy / n;
                let m_dy_xhat = sum_dy_xhat / n;
                ndarray::Zip::from(&mut dxc).and(&dyc).and(&xhat_c).for_each(|dxv, &dyv, &xh| {
                    *dxv = g * istd * (dyv - m_dy - xh * m_dy_xhat);
                });
            } else {
                ndarray::Zip::from(&mut dxc).and(&dyc).for_each(|dxv, &dyv| {
                    *dxv = g * istd * dyv;
                });
            }
        }
        dx
    }
}

impl Block for BatchNorm3d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        let mean_name = format!("{}.running_mean", self.name);
        f(&mean_name, &mut self.running_mean);
        let var_name = format!("{}.running_var", self.name);
        f(&var_name, &mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand5(shape: (usize, usize, usize, usize, usize), rng: &mut ChaCha12Rng) -> Array5<f64> {
        let n = shape.0 * shape.1 * shape.2 * shape.3 * shape.4;
        let v: Vec<f64> = (0..n).map(|_| 2.0 * rng.gen::<f64>() + 1.0).collect();
        Array5::from_shape_vec(shape, v).unwrap()
    }

    #[test]
    fn train_output_is_standardized_per_channel() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut bn = BatchNorm3d::new("bn", 3);
        let x = rand5((2, 3, 4, 4, 4), &mut rng);
        let y = bn.forward(&x, true);
        for ci in 0..3 {
            let yc = y.index_axis(Axis(1), ci);
            let mean = yc.mean().unwrap();
            let var = yc.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn eval_uses_running_statistics() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut bn = BatchNorm3d::new("bn", 2);
        let x = rand5((2, 2, 3, 3, 3), &mut rng);
        // converge the running stats onto this batch
        for _ in 0..400 {
            let _ = bn.forward(&x, true);
        }
        let y_train = bn.forward(&x, true);
        let y_eval = bn.forward(&x, false);
        let err = (&y_train - &y_eval).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        assert!(err < 1e-6, "running stats did not converge: {}", err);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut bn = BatchNorm3d::new("bn", 2);
        for v in bn.gamma.w.iter_mut() {
            *v = 0.5 + rng.gen::<f64>();
        }
        let x = rand5((2, 2, 3, 3, 3), &mut rng);
        let r = rand5((2, 2, 3, 3, 3), &mut rng);
        let loss = |bn: &mut BatchNorm3d, x: &Array5<f64>| (&bn.forward(x, true) * &r).sum();

        let _ = bn.forward(&x, true);
        let dx = bn.backward(&r);
        let h = 1e-6;
        for &idx in &[(0usize, 0usize, 0usize, 0usize, 0usize), (1, 1, 2, 2, 2), (0, 1, 1, 0, 2)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&mut bn, &xp) - loss(&mut bn, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-5, "dx at {:?}: fd {} got {}", idx, fd, dx[idx]);
        }
        for ci in 0..2 {
            let orig = bn.gamma.w[ci];
            bn.gamma.w[ci] = orig + h;
            let lp = loss(&mut bn, &x);
            bn.gamma.w[ci] = orig - h;
            let lm = loss(&mut bn, &x);
            bn.gamma.w[ci] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - bn.gamma.g[ci]).abs() < 1e-5);
        }
    }
}
