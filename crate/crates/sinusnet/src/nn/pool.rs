//! Global average pooling.

use ndarray::{Array2, Array5};

/// Mean over the spatial axes: `(B, C, D, H, W)` -> `(B, C)`.
pub struct GlobalAvgPool {
    cache_dim: Option<(usize, usize, usize, usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool { cache_dim: None }
    }

    pub fn forward(&mut self, x: &Array5<f64>, train: bool) -> Array2<f64> {
        let dim = x.dim();
        let (b, c, d, h, w) = dim;
        let n = (d * h * w) as f64;
        let mut y = Array2::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                y[(bi, ci)] = x.index_axis(ndarray::Axis(0), bi).index_axis(ndarray::Axis(0), ci).sum() / n;
            }
        }
        self.cache_dim = train.then_some(dim);
        y
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array5<f64> {
        let (b, c, d, h, w) = self.cache_dim.take().expect("pool backward without cached forward");
        let n = (d * h * w) as f64;
        let mut dx = Array5::zeros((b, c, d, h, w));
        for bi in 0..b {
            for ci in 0..c {
                let v = dy[(bi, ci)] / n;
                dx.index_axis_mut(ndarray::Axis(0), bi)
                    .index_axis_mut(ndarray::Axis(0), ci)
                    .fill(v);
            }
        }
        dx
    }
}

impl Default for GlobalAvgPool {
    fn default() -> Self {
        Self::new()
    }
}
