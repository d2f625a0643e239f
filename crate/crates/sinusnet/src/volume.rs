//! Dense 3D scalar volumes and the deterministic transforms applied to them.
//!
//! A [`Volume`] is the universal payload of the pipeline: a cropped sinus
//! subvolume, an autoencoder reconstruction, or a residual map. Axes are
//! ordered `(D, H, W)` and the last axis (`W`) is the left-right axis.

use ndarray::{Array3, Zip};

use crate::error::{Error, Result};

/// Default edge length of a model-ready subvolume, in voxels.
///
/// Every volume entering a full-scale model is `64 x 64 x 64`; reduced sizes
/// are used by micro models in tests and smoke runs.
pub const DEFAULT_VOLUME_SIZE: usize = 64;

/// A dense 3D scalar grid with voxel spacing metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// Voxel values, shape `(D, H, W)`.
    pub data: Array3<f32>,
    /// Voxel spacing in millimetres per axis, ordered like the data axes.
    pub spacing: [f32; 3],
    /// Opaque identifier, usually the sample id or file stem.
    pub id: String,
}

impl Volume {
    /// Wrap raw data, rejecting non-finite voxels.
    pub fn new(data: Array3<f32>, spacing: [f32; 3], id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        let bad = data.iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            return Err(Error::NonFiniteVoxels { id, count: bad });
        }
        Ok(Volume { data, spacing, id })
    }

    /// All-zero volume of cubic shape `size`.
    pub fn zeros(size: usize, id: impl Into<String>) -> Self {
        Volume {
            data: Array3::zeros((size, size, size)),
            spacing: [1.0; 3],
            id: id.into(),
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }

    /// Number of non-finite voxels (0 for any volume built via `new`).
    pub fn count_non_finite(&self) -> usize {
        self.data.iter().filter(|v| !v.is_finite()).count()
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Same id/spacing, new data.
    pub fn with_data(&self, data: Array3<f32>) -> Self {
        Volume { data, spacing: self.spacing, id: self.id.clone() }
    }
}

/// Min-max scale values into `[0, 1]`.
///
/// Constant volumes map to all zeros rather than dividing by zero.
pub fn normalize(v: &Volume) -> Volume {
    let lo = v.min();
    let hi = v.max();
    let range = hi - lo;
    let data = if range > 0.0 {
        v.data.mapv(|x| (x - lo) / range)
    } else {
        Array3::zeros(v.data.raw_dim())
    };
    v.with_data(data)
}

/// Reverse the left-right axis (axis `W`).
pub fn flip_lr(v: &Volume) -> Volume {
    let mut data = v.data.clone();
    data.invert_axis(ndarray::Axis(2));
    v.with_data(data)
}

/// Extract a `size`-shaped box centered at `centroid`.
///
/// Centroids too close to the border are clamped toward the interior so the
/// box always lies inside the volume. Fails if the volume is smaller than
/// the requested crop along any axis.
pub fn crop_subvolume(
    v: &Volume,
    centroid: (usize, usize, usize),
    size: (usize, usize, usize),
) -> Result<Volume> {
    let (d, h, w) = v.shape();
    let dims = [d, h, w];
    let want = [size.0, size.1, size.2];
    let center = [centroid.0, centroid.1, centroid.2];
    let mut start = [0usize; 3];
    for ax in 0..3 {
        if want[ax] > dims[ax] {
            return Err(Error::Dimension(format!(
                "crop size {} exceeds volume extent {} on axis {}",
                want[ax], dims[ax], ax
            )));
        }
        let half = want[ax] / 2;
        let lo = center[ax].saturating_sub(half);
        start[ax] = lo.min(dims[ax] - want[ax]);
    }
    let data = v
        .data
        .slice(ndarray::s![
            start[0]..start[0] + want[0],
            start[1]..start[1] + want[1],
            start[2]..start[2] + want[2]
        ])
        .to_owned();
    Ok(v.with_data(data))
}

/// Median filter with a cubic `kernel^3` neighborhood and replicate padding.
///
/// `kernel` must be odd. Kernel 1 is the identity.
pub fn median_filter3d(v: &Volume, kernel: usize) -> Result<Volume> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::Argument(format!(
            "median filter kernel must be odd and >= 1, got {}",
            kernel
        )));
    }
    if kernel == 1 {
        return Ok(v.clone());
    }
    let (d, h, w) = v.shape();
    let r = (kernel / 2) as isize;
    let mut out = Array3::<f32>::zeros((d, h, w));
    let mut buf = Vec::with_capacity(kernel * kernel * kernel);
    let clampi = |x: isize, n: usize| -> usize { x.clamp(0, n as isize - 1) as usize };
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                buf.clear();
                for dz in -r..=r {
                    let zz = clampi(z as isize + dz, d);
                    for dy in -r..=r {
                        let yy = clampi(y as isize + dy, h);
                        for dx in -r..=r {
                            let xx = clampi(x as isize + dx, w);
                            buf.push(v.data[(zz, yy, xx)]);
                        }
                    }
                }
                let mid = buf.len() / 2;
                buf.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
                out[(z, y, x)] = buf[mid];
            }
        }
    }
    Ok(v.with_data(out))
}

/// Voxelwise absolute difference `|a - b|`.
pub fn abs_diff(a: &Volume, b: &Volume) -> Result<Volume> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "abs_diff shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Array3::zeros(a.data.raw_dim());
    Zip::from(&mut data)
        .and(&a.data)
        .and(&b.data)
        .for_each(|o, &x, &y| *o = (x - y).abs());
    Ok(a.with_data(data))
}

/// Clamp every voxel into `[0, 1]`.
pub fn clamp01(v: &Volume) -> Volume {
    v.with_data(v.data.mapv(|x| x.clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn cube(vals: &[f32], n: usize) -> Volume {
        Volume::new(
            Array3::from_shape_vec((n, n, n), vals.to_vec()).unwrap(),
            [1.0; 3],
            "t",
        )
        .unwrap()
    }

    #[test]
    fn new_rejects_nan_with_count() {
        let mut data = Array3::<f32>::zeros((4, 4, 4));
        data[(1, 2, 3)] = f32::NAN;
        match Volume::new(data, [1.0; 3], "bad") {
            Err(Error::NonFiniteVoxels { count, .. }) => assert_eq!(count, 1),
            other => panic!("expected NonFiniteVoxels, got {:?}", other),
        }
    }

    #[test]
    fn normalize_maps_min_max() {
        let mut vals = vec![6.0_f32; 27];
        vals[0] = 2.0;
        vals[26] = 10.0;
        let v = normalize(&cube(&vals, 3));
        assert_eq!(v.data[(0, 0, 0)], 0.0);
        assert_eq!(v.data[(0, 0, 1)], 0.5);
        assert_eq!(v.data[(2, 2, 2)], 1.0);
    }

    #[test]
    fn normalize_full_range_is_identity() {
        let mut vals = vec![0.25_f32; 27];
        vals[0] = 0.0;
        vals[26] = 1.0;
        let v = cube(&vals, 3);
        assert_eq!(normalize(&v).data, v.data);
    }

    #[test]
    fn normalize_constant_maps_to_zeros() {
        let v = normalize(&cube(&[7.5; 27], 3));
        assert!(v.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn flip_is_involution_and_moves_impulse() {
        let mut v = Volume::zeros(64, "imp");
        v.data[(0, 0, 0)] = 1.0;
        let f = flip_lr(&v);
        assert_eq!(f.data[(0, 0, 63)], 1.0);
        assert_eq!(f.data[(0, 0, 0)], 0.0);
        assert_eq!(flip_lr(&f).data, v.data);
    }

    #[test]
    fn flip_leaves_symmetric_volume_unchanged() {
        let mut v = Volume::zeros(8, "sym");
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    v.data[(z, y, x)] = (x.min(7 - x)) as f32;
                }
            }
        }
        assert_eq!(flip_lr(&v).data, v.data);
    }

    #[test]
    fn crop_center_of_large_volume() {
        let mut v = Volume {
            data: Array3::zeros((128, 128, 128)),
            spacing: [1.0; 3],
            id: "big".into(),
        };
        v.data[(64, 64, 64)] = 1.0;
        let c = crop_subvolume(&v, (64, 64, 64), (64, 64, 64)).unwrap();
        assert_eq!(c.shape(), (64, 64, 64));
        // box spans 32..96 on each axis, so the marked voxel lands at 32
        assert_eq!(c.data[(32, 32, 32)], 1.0);
    }

    #[test]
    fn crop_clamps_corner_centroid() {
        let mut v = Volume {
            data: Array3::zeros((128, 128, 128)),
            spacing: [1.0; 3],
            id: "big".into(),
        };
        v.data[(0, 0, 0)] = 1.0;
        let c = crop_subvolume(&v, (0, 0, 0), (64, 64, 64)).unwrap();
        assert_eq!(c.shape(), (64, 64, 64));
        assert_eq!(c.data[(0, 0, 0)], 1.0);
    }

    #[test]
    fn crop_constant_stays_constant() {
        let v = cube(&[0.3; 512], 8);
        let c = crop_subvolume(&v, (4, 4, 4), (4, 4, 4)).unwrap();
        assert!(c.data.iter().all(|&x| x == 0.3));
    }

    #[test]
    fn crop_too_large_errors() {
        let v = Volume::zeros(32, "small");
        assert!(matches!(
            crop_subvolume(&v, (16, 16, 16), (64, 64, 64)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn median_kernel_one_is_identity() {
        let vals: Vec<f32> = (0..27).map(|i| i as f32 * 0.1).collect();
        let v = cube(&vals, 3);
        assert_eq!(median_filter3d(&v, 1).unwrap().data, v.data);
    }

    #[test]
    fn median_even_kernel_rejected() {
        let v = Volume::zeros(4, "z");
        assert!(matches!(median_filter3d(&v, 4), Err(Error::Argument(_))));
    }

    #[test]
    fn median_removes_single_impulse() {
        let mut v = Volume::zeros(64, "imp");
        v.data[(30, 30, 30)] = 1.0;
        let out = median_filter3d(&v, 5).unwrap();
        assert!(out.data.iter().all(|&x| x == 0.0));
    }

    /// Brute-force oracle: sorted median of the replicate-padded neighborhood.
    fn median_oracle(v: &Volume, kernel: usize) -> Volume {
        let (d, h, w) = v.shape();
        let r = (kernel / 2) as isize;
        let mut out = Array3::<f32>::zeros((d, h, w));
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut vals = Vec::new();
                    for dz in -r..=r {
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let zz = (z as isize + dz).clamp(0, d as isize - 1) as usize;
                                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                                vals.push(v.data[(zz, yy, xx)]);
                            }
                        }
                    }
                    vals.sort_by(|a, b| a.total_cmp(b));
                    out[(z, y, x)] = vals[vals.len() / 2];
                }
            }
        }
        v.with_data(out)
    }

    #[test]
    fn median_matches_oracle_on_random_volumes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        for kernel in [1usize, 3, 5] {
            let vals: Vec<f32> = (0..512).map(|_| rng.gen::<f32>()).collect();
            let v = cube(&vals, 8);
            let got = median_filter3d(&v, kernel).unwrap();
            let want = median_oracle(&v, kernel);
            assert_eq!(got.data, want.data, "kernel {}", kernel);
        }
    }
}
