//! 3D convolution via im2col and GEMM.
//!
//! Inputs are `(batch, channels, depth, height, width)` in `f64`. The
//! backward pass rebuilds the im2col matrix from the cached input instead
//! of caching it, trading FLOPs for a much smaller activation footprint.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array5, ArrayD, Axis};
use rand_chacha::ChaCha12Rng;

use super::init::kaiming_normal;
use super::param::{Block, Param};

pub struct Conv3d {
    pub weight: Param,
    pub bias: Option<Param>,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    cache: Option<Array5<f64>>,
}

impl Conv3d {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let fan_in = cin * k * k * k;
        let weight = Param::new(
            format!("{}.weight", name),
            kaiming_normal(&[cout, cin, k, k, k], fan_in, rng),
            true,
        );
        let bias = bias.then(|| {
            Param::new(format!("{}.bias", name), ArrayD::zeros(ndarray::IxDyn(&[cout])), false)
        });
        Conv3d { weight, bias, cin, cout, k, stride, padding, cache: None }
    }

    pub fn out_spatial(&self, d: usize) -> usize {
        (d + 2 * self.padding - self.k) / self.stride + 1
    }

    pub fn forward(&mut self, x: &Array5<f64>, train: bool) -> Array5<f64> {
        // im2col walks raw slices, so the input must be in standard layout;
        // normalizing here also keeps the cached copy sliceable in backward.
        let x_std;
        let x = if x.is_standard_layout() {
            x
        } else {
            x_std = x.as_standard_layout().into_owned();
            &x_std
        };
        let (b, c, d, h, w) = x.dim();
        assert_eq!(c, self.cin, "conv {} expects {} input channels, got {}", self.weight.name, self.cin, c);
        let (od, oh, ow) = (self.out_spatial(d), self.out_spatial(h), self.out_spatial(w));
        let n = od * oh * ow;
        let ck3 = self.cin * self.k * self.k * self.k;
        let w2 = self.weight.w.view().into_shape_with_order((self.cout, ck3)).unwrap();
        let mut out = Array5::zeros((b, self.cout, od, oh, ow));
        let mut col = Array2::zeros((ck3, n));
        for bi in 0..b {
            let xi = x.index_axis(Axis(0), bi);
            im2col(
                xi.as_slice().unwrap(),
                (c, d, h, w),
                self.k,
                self.stride,
                self.padding,
                (od, oh, ow),
                col.as_slice_mut().unwrap(),
            );
            let mut oi = out.index_axis_mut(Axis(0), bi);
            let mut o2 = oi.view_mut().into_shape_with_order((self.cout, n)).unwrap();
            general_mat_mul(1.0, &w2, &col, 0.0, &mut o2);
            if let Some(bias) = &self.bias {
                for (ci, mut row) in o2.outer_iter_mut().enumerate() {
                    row += bias.w[ci];
                }
            }
        }
        self.cache = train.then(|| x.clone());
        out
    }

    pub fn backward(&mut self, dy: &Array5<f64>) -> Array5<f64> {
        let x = self.cache.take().expect("conv backward without cached forward");
        let (b, c, d, h, w) = x.dim();
        let (_, _, od, oh, ow) = dy.dim();
        let n = od * oh * ow;
        let ck3 = self.cin * self.k * self.k * self.k;
        let w2 = self.weight.w.view().into_shape_with_order((self.cout, ck3)).unwrap();
        let mut dx = Array5::zeros((b, c, d, h, w));
        let mut col = Array2::zeros((ck3, n));
        let mut dcol = Array2::zeros((ck3, n));
        let mut wg_acc = Array2::zeros((self.cout, ck3));
        for bi in 0..b {
            let xi = x.index_axis(Axis(0), bi);
            im2col(
                xi.as_slice().unwrap(),
                (c, d, h, w),
                self.k,
                self.stride,
                self.padding,
                (od, oh, ow),
                col.as_slice_mut().unwrap(),
            );
            let dyi = dy.index_axis(Axis(0), bi);
            let dy2 = dyi.into_shape_with_order((self.cout, n)).unwrap();
            general_mat_mul(1.0, &dy2, &col.t(), 1.0, &mut wg_acc);
            if let Some(bias) = &mut self.bias {
                let sums = dy2.sum_axis(Axis(1));
                for (ci, s) in sums.iter().enumerate() {
                    bias.g[ci] += s;
                }
            }
            general_mat_mul(1.0, &w2.t(), &dy2, 0.0, &mut dcol);
            let mut dxi = dx.index_axis_mut(Axis(0), bi);
            col2im(
                dcol.as_slice().unwrap(),
                (c, d, h, w),
                self.k,
                self.stride,
                self.padding,
                (od, oh, ow),
                dxi.as_slice_mut().unwrap(),
            );
        }
        let mut wg = self.weight.g.view_mut().into_shape_with_order((self.cout, ck3)).unwrap();
        wg += &wg_acc;
        dx
    }
}

impl Block for Conv3d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Unfold one `(C, D, H, W)` item into a `(C*k^3, od*oh*ow)` matrix.
/// Out-of-bounds taps stay zero (zero padding).
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    (c, d, h, w): (usize, usize, usize, usize),
    k: usize,
    s: usize,
    p: usize,
    (od, oh, ow): (usize, usize, usize),
    col: &mut [f64],
) {
    col.fill(0.0);
    let p = p as isize;
    for cc in 0..c {
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((cc * k + kz) * k + ky) * k + kx;
                    let row_base = row * od * oh * ow;
                    for z in 0..od {
                        let sz = (z * s + kz) as isize - p;
                        if sz < 0 || sz >= d as isize {
                            continue;
                        }
                        for y in 0..oh {
                            let sy = (y * s + ky) as isize - p;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let out_base = row_base + (z * oh + y) * ow;
                            let in_base = ((cc * d + sz as usize) * h + sy as usize) * w;
                            for xx in 0..ow {
                                let sx = (xx * s + kx) as isize - p;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                col[out_base + xx] = x[in_base + sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter a column-matrix gradient back onto the input layout (adjoint of
/// `im2col`; overlapping taps accumulate).
#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f64],
    (c, d, h, w): (usize, usize, usize, usize),
    k: usize,
    s: usize,
    p: usize,
    (od, oh, ow): (usize, usize, usize),
    dx: &mut [f64],
) {
    let p = p as isize;
    for cc in 0..c {
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((cc * k + kz) * k + ky) * k + kx;
                    let row_base = row * od * oh * ow;
                    for z in 0..od {
                        let sz = (z * s + kz) as isize - p;
                        if sz < 0 || sz >= d as isize {
                            continue;
                        }
                        for y in 0..oh {
                            let sy = (y * s + ky) as isize - p;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let out_base = row_base + (z * oh + y) * ow;
                            let in_base = ((cc * d + sz as usize) * h + sy as usize) * w;
                            for xx in 0..ow {
                                let sx = (xx * s + kx) as isize - p;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                dx[in_base + sx as usize] += col[out_base + xx];
                            }
                        }
                    }
                }
            }
        }
    }
}
