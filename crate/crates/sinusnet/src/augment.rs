//! Stochastic augmentations: random affine, left-right flip, Gaussian noise.
//!
//! All randomness flows through a caller-supplied ChaCha stream, so a fixed
//! seed makes every augmentation a pure function of its inputs. The plan
//! drawing is split from the application so that an input/target pair can
//! share one set of geometric draws while intensity noise hits the input
//! only (needed when the target is a spatially aligned residual map).

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// One augmentation family; the policy lists them in application order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugStep {
    Affine,
    Flip,
    Noise,
}

/// Probabilities and parameter ranges for the augmentation pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    /// Probability of applying a random affine transform.
    pub p_affine: f64,
    /// Rotation range in degrees about each axis (symmetric around 0).
    pub rotation_deg: [f64; 3],
    /// Translation range in voxels along each axis (symmetric around 0).
    pub translation_vox: [f64; 3],
    /// Isotropic scale factor range `[lo, hi]`.
    pub scale_range: [f64; 2],
    /// Probability of a left-right flip.
    pub p_flip: f64,
    /// Probability of additive Gaussian noise.
    pub p_noise: f64,
    pub noise_mean: f64,
    pub noise_std: f64,
    /// Application order of the three families.
    pub order: Vec<AugStep>,
    /// Seed used by `augment_seeded`.
    pub rng_seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            p_affine: 0.5,
            rotation_deg: [10.0; 3],
            translation_vox: [4.0; 3],
            scale_range: [0.9, 1.1],
            p_flip: 0.5,
            p_noise: 0.5,
            noise_mean: 0.0,
            noise_std: 0.1,
            order: vec![AugStep::Affine, AugStep::Flip, AugStep::Noise],
            rng_seed: 0,
        }
    }
}

impl AugmentationPolicy {
    /// No-op policy (all probabilities zero).
    pub fn disabled() -> Self {
        AugmentationPolicy { p_affine: 0.0, p_flip: 0.0, p_noise: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_affine", self.p_affine),
            ("p_flip", self.p_flip),
            ("p_noise", self.p_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{} = {} is outside [0, 1]", name, p)));
            }
        }
        if self.scale_range[0] <= 0.0 || self.scale_range[1] < self.scale_range[0] {
            return Err(Error::Config(format!(
                "scale_range {:?} must satisfy 0 < lo <= hi",
                self.scale_range
            )));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// Sampled affine transform parameters.
#[derive(Debug, Clone, Copy)]
pub struct AffineParams {
    /// Rotation angles in radians about axes (D, H, W).
    pub rot: [f64; 3],
    /// Translation in voxels along (D, H, W).
    pub trans: [f64; 3],
    /// Isotropic scale factor.
    pub scale: f64,
}

/// A fully drawn augmentation plan: gates resolved, parameters sampled.
#[derive(Debug, Clone)]
pub enum PlannedStep {
    Affine(AffineParams),
    Flip,
    /// Standard-normal noise field; scaled by mean/std at application time.
    Noise(Array3<f32>),
    Skip,
}

fn uniform(rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> f64 {
    lo + rng.gen::<f64>() * (hi - lo)
}

/// Standard-normal field of the given cubic-or-not shape.
pub fn standard_normal_field(shape: (usize, usize, usize), rng: &mut ChaCha12Rng) -> Array3<f32> {
    let mut field = Array3::zeros(shape);
    for v in field.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    field
}

fn draw_affine(policy: &AugmentationPolicy, rng: &mut ChaCha12Rng) -> AffineParams {
    let mut rot = [0.0; 3];
    for (r, &range) in rot.iter_mut().zip(&policy.rotation_deg) {
        *r = uniform(rng, -range, range).to_radians();
    }
    let mut trans = [0.0; 3];
    for (t, &range) in trans.iter_mut().zip(&policy.translation_vox) {
        *t = uniform(rng, -range, range);
    }
    let scale = uniform(rng, policy.scale_range[0], policy.scale_range[1]);
    AffineParams { rot, trans, scale }
}

/// Resolve gates and sample all parameters for one augmentation call.
pub fn draw_plan(
    policy: &AugmentationPolicy,
    shape: (usize, usize, usize),
    rng: &mut ChaCha12Rng,
) -> Vec<PlannedStep> {
    policy
        .order
        .iter()
        .map(|step| match step {
            AugStep::Affine => {
                if rng.gen::<f64>() < policy.p_affine {
                    PlannedStep::Affine(draw_affine(policy, rng))
                } else {
                    PlannedStep::Skip
                }
            }
            AugStep::Flip => {
                if rng.gen::<f64>() < policy.p_flip {
                    PlannedStep::Flip
                } else {
                    PlannedStep::Skip
                }
            }
            AugStep::Noise => {
                if rng.gen::<f64>() < policy.p_noise {
                    PlannedStep::Noise(standard_normal_field(shape, rng))
                } else {
                    PlannedStep::Skip
                }
            }
        })
        .collect()
}

/// Apply a drawn plan. `with_noise = false` skips intensity noise, which is
/// how a geometric transform is replayed onto an aligned target volume.
pub fn apply_plan(
    v: &Volume,
    plan: &[PlannedStep],
    policy: &AugmentationPolicy,
    with_noise: bool,
) -> Volume {
    let mut out = v.clone();
    for step in plan {
        match step {
            PlannedStep::Affine(params) => out = apply_affine(&out, params),
            PlannedStep::Flip => out = crate::volume::flip_lr(&out),
            PlannedStep::Noise(field) => {
                if with_noise {
                    let mean = policy.noise_mean as f32;
                    let std = policy.noise_std as f32;
                    ndarray::Zip::from(&mut out.data)
                        .and(field)
                        .for_each(|o, &n| *o += mean + std * n);
                }
            }
            PlannedStep::Skip => {}
        }
    }
    crate::volume::clamp01(&out)
}

/// Apply each augmentation family independently with its probability.
///
/// The output is re-clamped to `[0, 1]`; a fixed RNG state makes the call
/// deterministic.
pub fn augment(v: &Volume, policy: &AugmentationPolicy, rng: &mut ChaCha12Rng) -> Volume {
    let plan = draw_plan(policy, v.shape(), rng);
    apply_plan(v, &plan, policy, true)
}

/// `augment` with a stream derived from `policy.rng_seed`.
pub fn augment_seeded(v: &Volume, policy: &AugmentationPolicy) -> Volume {
    use rand::SeedableRng;
    let mut rng = ChaCha12Rng::seed_from_u64(policy.rng_seed);
    augment(v, policy, &mut rng)
}

/// Augment an input/target pair with shared geometry.
///
/// Geometric steps (affine, flip) are applied to both volumes from one set
/// of draws; intensity noise is applied to the input only.
pub fn augment_pair(
    input: &Volume,
    target: &Volume,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha12Rng,
) -> (Volume, Volume) {
    let plan = draw_plan(policy, input.shape(), rng);
    let a = apply_plan(input, &plan, policy, true);
    let b = apply_plan(target, &plan, policy, false);
    (a, b)
}

/// Resample `v` through the inverse of the sampled affine map, rotating and
/// scaling about the volume center. Trilinear interpolation, zeros outside.
pub fn apply_affine(v: &Volume, p: &AffineParams) -> Volume {
    let (d, h, w) = v.shape();
    let center = [
        (d as f64 - 1.0) / 2.0,
        (h as f64 - 1.0) / 2.0,
        (w as f64 - 1.0) / 2.0,
    ];
    let r = rotation_matrix(p.rot);
    // forward map: q = s * R * (p - c) + c + t; sample input at its inverse
    let inv_scale = 1.0 / p.scale;
    let mut out = Array3::zeros((d, h, w));
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let q = [
                    z as f64 - center[0] - p.trans[0],
                    y as f64 - center[1] - p.trans[1],
                    x as f64 - center[2] - p.trans[2],
                ];
                // R^T is R^-1 for a rotation
                let src = [
                    inv_scale * (r[0][0] * q[0] + r[1][0] * q[1] + r[2][0] * q[2]) + center[0],
                    inv_scale * (r[0][1] * q[0] + r[1][1] * q[1] + r[2][1] * q[2]) + center[1],
                    inv_scale * (r[0][2] * q[0] + r[1][2] * q[1] + r[2][2] * q[2]) + center[2],
                ];
                out[(z, y, x)] = sample_trilinear(&v.data, src);
            }
        }
    }
    v.with_data(out)
}

fn rotation_matrix(rot: [f64; 3]) -> [[f64; 3]; 3] {
    let (s0, c0) = rot[0].sin_cos();
    let (s1, c1) = rot[1].sin_cos();
    let (s2, c2) = rot[2].sin_cos();
    // rotations about axis 0, then 1, then 2
    let r0 = [[1.0, 0.0, 0.0], [0.0, c0, -s0], [0.0, s0, c0]];
    let r1 = [[c1, 0.0, s1], [0.0, 1.0, 0.0], [-s1, 0.0, c1]];
    let r2 = [[c2, -s2, 0.0], [s2, c2, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&r2, &mat_mul(&r1, &r0))
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn sample_trilinear(data: &Array3<f32>, src: [f64; 3]) -> f32 {
    let dims = data.shape();
    let mut acc = 0.0f64;
    let base = [src[0].floor(), src[1].floor(), src[2].floor()];
    let frac = [src[0] - base[0], src[1] - base[1], src[2] - base[2]];
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let idx = [
                    base[0] as isize + dz as isize,
                    base[1] as isize + dy as isize,
                    base[2] as isize + dx as isize,
                ];
                if idx.iter().zip(dims).any(|(&i, &n)| i < 0 || i >= n as isize) {
                    continue;
                }
                let wz = if dz == 0 { 1.0 - frac[0] } else { frac[0] };
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                let wx = if dx == 0 { 1.0 - frac[2] } else { frac[2] };
                acc += wz * wy * wx
                    * data[(idx[0] as usize, idx[1] as usize, idx[2] as usize)] as f64;
            }
        }
    }
    acc as f32
}
