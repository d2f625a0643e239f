//! Fully connected layer on `(batch, features)` activations.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, Axis};
use rand_chacha::ChaCha12Rng;

use super::init::kaiming_normal;
use super::param::{Block, Param};

pub struct Linear {
    pub weight: Param, // (out, in)
    pub bias: Option<Param>,
    cin: usize,
    cout: usize,
    cache: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(name: &str, cin: usize, cout: usize, bias: bool, rng: &mut ChaCha12Rng) -> Self {
        let weight =
            Param::new(format!("{}.weight", name), kaiming_normal(&[cout, cin], cin, rng), true);
        let bias = bias.then(|| {
            Param::new(format!("{}.bias", name), ArrayD::zeros(ndarray::IxDyn(&[cout])), false)
        });
        Linear { weight, bias, cin, cout, cache: None }
    }

    pub fn forward(&mut self, x: &Array2<f64>, train: bool) -> Array2<f64> {
        let (b, f) = x.dim();
        assert_eq!(f, self.cin, "linear {} expects {} features, got {}", self.weight.name, self.cin, f);
        let w2 = self.weight.w.view().into_shape_with_order((self.cout, self.cin)).unwrap();
        let mut y = Array2::zeros((b, self.cout));
        general_mat_mul(1.0, x, &w2.t(), 0.0, &mut y);
        if let Some(bias) = &self.bias {
            for mut row in y.outer_iter_mut() {
                for (ci, v) in row.iter_mut().enumerate() {
                    *v += bias.w[ci];
                }
            }
        }
        self.cache = train.then(|| x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let x = self.cache.take().expect("linear backward without cached forward");
        let w2 = self.weight.w.view().into_shape_with_order((self.cout, self.cin)).unwrap();
        {
            let mut wg =
                self.weight.g.view_mut().into_shape_with_order((self.cout, self.cin)).unwrap();
            general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut wg);
        }
        if let Some(bias) = &mut self.bias {
            let sums = dy.sum_axis(Axis(0));
            for (ci, s) in sums.iter().enumerate() {
                bias.g[ci] += s;
            }
        }
        let mut dx = Array2::zeros(x.dim());
        general_mat_mul(1.0, dy, &w2, 0.0, &mut dx);
        dx
    }
}

impl Block for Linear {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn forward_matches_naive_matmul() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut lin = Linear::new("l", 3, 2, true, &mut rng);
        for v in lin.bias.as_mut().unwrap().w.iter_mut() {
            *v = rng.gen::<f64>();
        }
        let x = Array2::from_shape_fn((4, 3), |_| rng.gen::<f64>() - 0.5);
        let y = lin.forward(&x, false);
        for bi in 0..4 {
            for co in 0..2 {
                let mut acc = lin.bias.as_ref().unwrap().w[co];
                for ci in 0..3 {
                    acc += x[(bi, ci)] * lin.weight.w[[co, ci]];
                }
                assert!((y[(bi, co)] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut lin = Linear::new("l", 4, 3, true, &mut rng);
        let x = Array2::from_shape_fn((2, 4), |_| rng.gen::<f64>() - 0.5);
        let r = Array2::from_shape_fn((2, 3), |_| rng.gen::<f64>() - 0.5);
        let loss = |lin: &mut Linear, x: &Array2<f64>| (&lin.forward(x, false) * &r).sum();

        let _ = lin.forward(&x, true);
        let dx = lin.backward(&r);
        let h = 1e-6;
        for idx in [(0, 0), (1, 3), (0, 2)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&mut lin, &xp) - loss(&mut lin, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-7);
        }
        for flat in [0usize, 5, 11] {
            let orig = lin.weight.w.as_slice().unwrap()[flat];
            lin.weight.w.as_slice_mut().unwrap()[flat] = orig + h;
            let lp = loss(&mut lin, &x);
            lin.weight.w.as_slice_mut().unwrap()[flat] = orig - h;
            let lm = loss(&mut lin, &x);
            lin.weight.w.as_slice_mut().unwrap()[flat] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - lin.weight.g.as_slice().unwrap()[flat]).abs() < 1e-7);
        }
    }
}
