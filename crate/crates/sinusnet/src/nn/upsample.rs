//! Trilinear 2x upsampling, half-pixel aligned (align_corners = false).
//!
//! Source coordinates are clamped at the borders, which reproduces the
//! replicate behaviour of the usual resize implementations. The layer has
//! no parameters; backward scatters with the same interpolation weights.

use ndarray::Array5;

pub struct Upsample2x {
    cache_dim: Option<(usize, usize, usize, usize, usize)>,
}

/// Per output index along one axis: the two source taps and their weights.
fn axis_taps(n_in: usize) -> Vec<(usize, usize, f64, f64)> {
    let n_out = n_in * 2;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let f = src.floor();
            let t = src - f;
            let i0 = (f as isize).clamp(0, n_in as isize - 1) as usize;
            let i1 = ((f as isize) + 1).clamp(0, n_in as isize - 1) as usize;
            (i0, i1, 1.0 - t, t)
        })
        .collect()
}

impl Upsample2x {
    pub fn new() -> Self {
        Upsample2x { cache_dim: None }
    }

    pub fn forward(&mut self, x: &Array5<f64>, train: bool) -> Array5<f64> {
        let dim = x.dim();
        let (b, c, d, h, w) = dim;
        let (tz, ty, tx) = (axis_taps(d), axis_taps(h), axis_taps(w));
        let mut y = Array5::zeros((b, c, 2 * d, 2 * h, 2 * w));
        for bi in 0..b {
            for ci in 0..c {
                let xi = x.index_axis(ndarray::Axis(0), bi);
                let xi = xi.index_axis(ndarray::Axis(0), ci);
                let mut yi = y.index_axis_mut(ndarray::Axis(0), bi);
                let mut yi = yi.index_axis_mut(ndarray::Axis(0), ci);
                for (oz, &(z0, z1, wz0, wz1)) in tz.iter().enumerate() {
                    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                            yi[(oz, oy, ox)] = wz0 * wy0 * wx0 * xi[(z0, y0, x0)]
                                + wz0 * wy0 * wx1 * xi[(z0, y0, x1)]
                                + wz0 * wy1 * wx0 * xi[(z0, y1, x0)]
                                + wz0 * wy1 * wx1 * xi[(z0, y1, x1)]
                                + wz1 * wy0 * wx0 * xi[(z1, y0, x0)]
                                + wz1 * wy0 * wx1 * xi[(z1, y0, x1)]
                                + wz1 * wy1 * wx0 * xi[(z1, y1, x0)]
                                + wz1 * wy1 * wx1 * xi[(z1, y1, x1)];
                        }
                    }
                }
            }
        }
        self.cache_dim = train.then_some(dim);
        y
    }

    pub fn backward(&mut self, dy: &Array5<f64>) -> Array5<f64> {
        let (b, c, d, h, w) =
            self.cache_dim.take().expect("upsample backward without cached forward");
        let (tz, ty, tx) = (axis_taps(d), axis_taps(h), axis_taps(w));
        let mut dx = Array5::zeros((b, c, d, h, w));
        for bi in 0..b {
            for ci in 0..c {
                let dyi = dy.index_axis(ndarray::Axis(0), bi);
                let dyi = dyi.index_axis(ndarray::Axis(0), ci);
                let mut dxi = dx.index_axis_mut(ndarray::Axis(0), bi);
                let mut dxi = dxi.index_axis_mut(ndarray::Axis(0), ci);
                for (oz, &(z0, z1, wz0, wz1)) in tz.iter().enumerate() {
                    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                            let g = dyi[(oz, oy, ox)];
                            dxi[(z0, y0, x0)] += wz0 * wy0 * wx0 * g;
                            dxi[(z0, y0, x1)] += wz0 * wy0 * wx1 * g;
                            dxi[(z0, y1, x0)] += wz0 * wy1 * wx0 * g;
                            dxi[(z0, y1, x1)] += wz0 * wy1 * wx1 * g;
                            dxi[(z1, y0, x0)] += wz1 * wy0 * wx0 * g;
                            dxi[(z1, y0, x1)] += wz1 * wy0 * wx1 * g;
                            dxi[(z1, y1, x0)] += wz1 * wy1 * wx0 * g;
                            dxi[(z1, y1, x1)] += wz1 * wy1 * wx1 * g;
                        }
                    }
                }
            }
        }
        dx
    }
}

impl Default for Upsample2x {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn ramp_upsamples_to_known_values() {
        // along one axis [0, 1] doubles to [0, 0.25, 0.75, 1]
        let x = Array5::from_shape_fn((1, 1, 2, 2, 2), |(_, _, _, _, w)| w as f64);
        let mut up = Upsample2x::new();
        let y = up.forward(&x, false);
        let want = [0.0, 0.25, 0.75, 1.0];
        for (ox, &w) in want.iter().enumerate() {
            for oz in 0..4 {
                for oy in 0..4 {
                    assert!((y[(0, 0, oz, oy, ox)] - w).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_volume_stays_constant() {
        let x = Array5::from_elem((1, 2, 3, 3, 3), 0.7);
        let mut up = Upsample2x::new();
        let y = up.forward(&x, false);
        assert!(y.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn backward_is_the_adjoint_of_forward() {
        // <Up(x), y> must equal <x, Up^T(y)> since the op is linear
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x = Array5::from_shape_fn((1, 2, 3, 3, 3), |_| rng.gen::<f64>() - 0.5);
        let y = Array5::from_shape_fn((1, 2, 6, 6, 6), |_| rng.gen::<f64>() - 0.5);
        let mut up = Upsample2x::new();
        let fx = up.forward(&x, true);
        let bty = up.backward(&y);
        let lhs = (&fx * &y).sum();
        let rhs = (&x * &bty).sum();
        assert!((lhs - rhs).abs() < 1e-10, "lhs {} rhs {}", lhs, rhs);
    }
}
