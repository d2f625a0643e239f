//! Synthetic sinus phantom generator.
//!
//! Each sample is one sinus side: an ellipsoidal air cavity (dark) inside a
//! bony shell (bright) on soft-tissue background, plus Gaussian texture
//! noise. Anomalous samples get one lesion written into the cavity region
//! together with its exact voxel mask. Right-side volumes are built in
//! mirrored orientation and flipped into the canonical (left) orientation,
//! matching how paired anatomy is pooled for training.
//!
//! Generation is deterministic: every sample derives its own RNG streams
//! from the config seed and the sample index, so output bytes depend only
//! on the config.

use std::fs;
use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{load_volume, save_volume};
use crate::seeding;
use crate::volume::{flip_lr, Volume};

const BACKGROUND: f32 = 0.3;
const SHELL: f32 = 0.7;
const CAVITY: f32 = 0.1;

/// Configuration for one synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    /// Number of sinus-side volumes. Two consecutive samples share a patient.
    pub n_samples: usize,
    /// Fraction of samples that receive a lesion.
    pub anomaly_fraction: f64,
    /// Cubic edge length in voxels.
    pub volume_size: usize,
    /// Std of additive Gaussian texture noise.
    pub texture_noise_std: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            n_samples: 100,
            anomaly_fraction: 0.4,
            volume_size: crate::volume::DEFAULT_VOLUME_SIZE,
            texture_noise_std: 0.05,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.anomaly_fraction) {
            return Err(Error::Config(format!(
                "anomaly_fraction = {} is outside [0, 1]",
                self.anomaly_fraction
            )));
        }
        if self.volume_size < 16 {
            return Err(Error::Config(format!(
                "volume_size = {} is below the minimum of 16",
                self.volume_size
            )));
        }
        if self.texture_noise_std < 0.0 {
            return Err(Error::Config("texture_noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleLabel {
    Normal,
    Anomalous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn letter(self) -> char {
        match self {
            Side::Left => 'L',
            Side::Right => 'R',
        }
    }
}

/// Lesion family written into an anomalous sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Solid sphere floating in the cavity.
    Blob,
    /// Mucosal band lining part of the inner wall.
    WallThickening,
    /// Wall-attached rounded mass.
    Polyp,
}

/// One generated sinus side with its metadata.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `p{patient:04}_{L|R}`.
    pub id: String,
    pub patient: String,
    pub side: Side,
    pub label: SampleLabel,
    pub anomaly_kind: Option<AnomalyKind>,
    pub volume: Volume,
    /// Exact voxels the lesion wrote; `None` for normal samples.
    pub gt_mask: Option<Array3<u8>>,
}

impl Sample {
    pub fn is_anomalous(&self) -> bool {
        self.label == SampleLabel::Anomalous
    }
}

/// Ellipsoid cavity parameters in natural (pre-flip) orientation.
struct Anatomy {
    center: [f64; 3],
    semi: [f64; 3],
    shell_thickness: f64,
}

impl Anatomy {
    /// Squared ellipsoid norm of a point w.r.t. the inner cavity surface.
    fn cavity_norm2(&self, p: [f64; 3]) -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            let d = (p[i] - self.center[i]) / self.semi[i];
            s += d * d;
        }
        s
    }

    fn outer_norm2(&self, p: [f64; 3]) -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            let d = (p[i] - self.center[i]) / (self.semi[i] + self.shell_thickness);
            s += d * d;
        }
        s
    }

    fn min_semi(&self) -> f64 {
        self.semi.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

// stream salts for per-sample seed derivation
const SALT_ANATOMY: u64 = 1;
const SALT_NOISE: u64 = 2;
const SALT_ANOMALY: u64 = 3;
const SALT_ASSIGNMENT: u64 = 0xA55;

fn sample_id(index: usize) -> (String, String, Side) {
    let patient = format!("p{:04}", index / 2);
    let side = if index % 2 == 0 { Side::Left } else { Side::Right };
    (format!("{}_{}", patient, side.letter()), patient, side)
}

fn draw_anatomy(cfg: &PhantomConfig, rng: &mut ChaCha12Rng, side: Side) -> Anatomy {
    let s = cfg.volume_size as f64;
    let mid = (s - 1.0) / 2.0;
    let mut semi = [0.0; 3];
    for a in semi.iter_mut() {
        *a = (0.26 + 0.06 * rng.gen::<f64>()) * s;
    }
    // the cavity sits slightly lateral; natural orientation depends on side
    let lateral = 0.06 * s;
    let lateral = match side {
        Side::Left => lateral,
        Side::Right => -lateral,
    };
    let mut center = [mid, mid, mid + lateral];
    for c in center.iter_mut() {
        *c += 2.0 * rng.gen::<f64>() - 1.0;
    }
    let shell_thickness = 2.0 + rng.gen::<f64>();
    Anatomy { center, semi, shell_thickness }
}

fn render_base(cfg: &PhantomConfig, anatomy: &Anatomy) -> Array3<f32> {
    let n = cfg.volume_size;
    let mut data = Array3::from_elem((n, n, n), BACKGROUND);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let p = [z as f64, y as f64, x as f64];
                if anatomy.cavity_norm2(p) <= 1.0 {
                    data[(z, y, x)] = CAVITY;
                } else if anatomy.outer_norm2(p) <= 1.0 {
                    data[(z, y, x)] = SHELL;
                }
            }
        }
    }
    data
}

fn add_texture_noise(data: &mut Array3<f32>, std: f64, rng: &mut ChaCha12Rng) {
    for v in data.iter_mut() {
        let n: f64 = StandardNormal.sample(rng);
        *v = (*v + (std * n) as f32).clamp(0.0, 1.0);
    }
}

fn random_unit(rng: &mut ChaCha12Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-6 {
            return [v[0] / norm, v[1] / norm, v[2] / norm];
        }
    }
}

fn inject_blob(
    data: &mut Array3<f32>,
    mask: &mut Array3<u8>,
    anatomy: &Anatomy,
    rng: &mut ChaCha12Rng,
) {
    let s = data.shape()[0] as f64;
    let a_min = anatomy.min_semi();
    let mut radius = (0.07 * s).max(3.0) + rng.gen::<f64>() * ((0.11 * s).max(3.5) - (0.07 * s).max(3.0));
    radius = radius.min(a_min - 0.5);
    // keep the whole sphere inside the cavity so its voxel count tracks the
    // analytic ball volume
    let max_offset = (a_min - radius - 0.5).max(0.0);
    let dir = random_unit(rng);
    let offset = rng.gen::<f64>() * max_offset;
    let center = [
        anatomy.center[0] + dir[0] * offset,
        anatomy.center[1] + dir[1] * offset,
        anatomy.center[2] + dir[2] * offset,
    ];
    let value = 0.55 + 0.25 * rng.gen::<f64>();
    write_sphere(data, mask, center, radius, value as f32, None);
}

fn inject_wall_thickening(
    data: &mut Array3<f32>,
    mask: &mut Array3<u8>,
    anatomy: &Anatomy,
    rng: &mut ChaCha12Rng,
) {
    let band = 1.5 + rng.gen::<f64>() * 1.5;
    let s_lo = (1.0 - band / anatomy.min_semi()).max(0.4);
    let dir = random_unit(rng);
    let cos_min = (35.0 + 30.0 * rng.gen::<f64>()) as f64;
    let cos_min = cos_min.to_radians().cos();
    let value = (0.6 + 0.1 * rng.gen::<f64>()) as f32;
    let dims = data.shape().to_vec();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z as f64, y as f64, x as f64];
                let n2 = anatomy.cavity_norm2(p);
                if n2 > 1.0 || n2.sqrt() < s_lo {
                    continue;
                }
                let r = [
                    p[0] - anatomy.center[0],
                    p[1] - anatomy.center[1],
                    p[2] - anatomy.center[2],
                ];
                let rn = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
                if rn < 1e-9 {
                    continue;
                }
                let cosang = (r[0] * dir[0] + r[1] * dir[1] + r[2] * dir[2]) / rn;
                if cosang >= cos_min {
                    data[(z, y, x)] = value;
                    mask[(z, y, x)] = 1;
                }
            }
        }
    }
}

fn inject_polyp(
    data: &mut Array3<f32>,
    mask: &mut Array3<u8>,
    anatomy: &Anatomy,
    rng: &mut ChaCha12Rng,
) {
    let a_min = anatomy.min_semi();
    let radius = (2.0 + 1.5 * rng.gen::<f64>()).min(a_min * 0.6);
    let dir = random_unit(rng);
    // center sits so the mass touches the wall and bulges into the cavity
    let t = 1.0 - radius / a_min;
    let center = [
        anatomy.center[0] + dir[0] * anatomy.semi[0] * t,
        anatomy.center[1] + dir[1] * anatomy.semi[1] * t,
        anatomy.center[2] + dir[2] * anatomy.semi[2] * t,
    ];
    let value = (0.55 + 0.2 * rng.gen::<f64>()) as f32;
    write_sphere(data, mask, center, radius, value, Some(anatomy));
}

/// Rasterize a sphere; when `inside` is given, restrict to the sinus region
/// (cavity plus shell) so lesions never spill into background tissue.
fn write_sphere(
    data: &mut Array3<f32>,
    mask: &mut Array3<u8>,
    center: [f64; 3],
    radius: f64,
    value: f32,
    inside: Option<&Anatomy>,
) {
    let dims = data.shape().to_vec();
    let lo = |c: f64| ((c - radius).floor().max(0.0)) as usize;
    let hi = |c: f64, n: usize| ((c + radius).ceil() as usize).min(n - 1);
    for z in lo(center[0])..=hi(center[0], dims[0]) {
        for y in lo(center[1])..=hi(center[1], dims[1]) {
            for x in lo(center[2])..=hi(center[2], dims[2]) {
                let dz = z as f64 - center[0];
                let dy = y as f64 - center[1];
                let dx = x as f64 - center[2];
                if dz * dz + dy * dy + dx * dx > radius * radius {
                    continue;
                }
                if let Some(a) = inside {
                    if a.outer_norm2([z as f64, y as f64, x as f64]) > 1.0 {
                        continue;
                    }
                }
                data[(z, y, x)] = value;
                mask[(z, y, x)] = 1;
            }
        }
    }
}

/// Clean (pre-lesion) sample volume in canonical orientation, including
/// texture noise. Anomalous generation differs from this only inside the
/// lesion mask.
pub fn generate_base_sample(cfg: &PhantomConfig, index: usize) -> Result<Volume> {
    cfg.validate()?;
    let (id, _, side) = sample_id(index);
    let anatomy = draw_anatomy(
        cfg,
        &mut ChaCha12Rng::seed_from_u64(seeding::derive2(cfg.seed, index as u64, SALT_ANATOMY)),
        side,
    );
    let mut data = render_base(cfg, &anatomy);
    add_texture_noise(
        &mut data,
        cfg.texture_noise_std,
        &mut ChaCha12Rng::seed_from_u64(seeding::derive2(cfg.seed, index as u64, SALT_NOISE)),
    );
    let v = Volume::new(data, [1.0; 3], id)?;
    Ok(match side {
        Side::Left => v,
        Side::Right => flip_lr(&v),
    })
}

fn generate_sample(cfg: &PhantomConfig, index: usize, anomalous: bool) -> Result<Sample> {
    let (id, patient, side) = sample_id(index);
    let anatomy = draw_anatomy(
        cfg,
        &mut ChaCha12Rng::seed_from_u64(seeding::derive2(cfg.seed, index as u64, SALT_ANATOMY)),
        side,
    );
    let mut data = render_base(cfg, &anatomy);
    let n = cfg.volume_size;
    let mut mask = Array3::<u8>::zeros((n, n, n));
    let kind = if anomalous {
        let mut rng =
            ChaCha12Rng::seed_from_u64(seeding::derive2(cfg.seed, index as u64, SALT_ANOMALY));
        let kind = match rng.gen_range(0..3u8) {
            0 => AnomalyKind::Blob,
            1 => AnomalyKind::WallThickening,
            _ => AnomalyKind::Polyp,
        };
        match kind {
            AnomalyKind::Blob => inject_blob(&mut data, &mut mask, &anatomy, &mut rng),
            AnomalyKind::WallThickening => {
                inject_wall_thickening(&mut data, &mut mask, &anatomy, &mut rng)
            }
            AnomalyKind::Polyp => inject_polyp(&mut data, &mut mask, &anatomy, &mut rng),
        }
        Some(kind)
    } else {
        None
    };
    add_texture_noise(
        &mut data,
        cfg.texture_noise_std,
        &mut ChaCha12Rng::seed_from_u64(seeding::derive2(cfg.seed, index as u64, SALT_NOISE)),
    );
    let mut volume = Volume::new(data, [1.0; 3], id.clone())?;
    if side == Side::Right {
        volume = flip_lr(&volume);
        mask.invert_axis(ndarray::Axis(2));
    }
    Ok(Sample {
        id,
        patient,
        side,
        label: if anomalous { SampleLabel::Anomalous } else { SampleLabel::Normal },
        anomaly_kind: kind,
        volume,
        gt_mask: if anomalous { Some(mask) } else { None },
    })
}

/// Generate the full dataset in memory.
///
/// Exactly `round(anomaly_fraction * n_samples)` samples are anomalous; the
/// assignment is a seeded shuffle, so the same config always yields the same
/// byte-identical volumes and labels.
pub fn generate_dataset(cfg: &PhantomConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let n = cfg.n_samples;
    let n_anom = (cfg.anomaly_fraction * n as f64).round() as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seeding::derive(cfg.seed, SALT_ASSIGNMENT));
    indices.shuffle(&mut rng);
    let mut anomalous = vec![false; n];
    for &i in indices.iter().take(n_anom) {
        anomalous[i] = true;
    }
    (0..n).map(|i| generate_sample(cfg, i, anomalous[i])).collect()
}

/// One manifest line describing a stored sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub patient: String,
    pub side: Side,
    pub label: SampleLabel,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub anomaly_kind: Option<AnomalyKind>,
    /// Path of the volume file, relative to the manifest.
    pub volume: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask: Option<String>,
}

/// Write volumes, masks, and a JSONL manifest under `dir`.
///
/// Returns the manifest path. Layout: `vols/{id}.svol`, `masks/{id}.svol`
/// (masks stored as 0/1 `f32`), `manifest.jsonl`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    let vols = dir.join("vols");
    let masks = dir.join("masks");
    fs::create_dir_all(&vols).map_err(|e| Error::io(dir, e))?;
    fs::create_dir_all(&masks).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut out = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    for s in samples {
        let vol_rel = format!("vols/{}.svol", s.id);
        save_volume(&dir.join(&vol_rel), &s.volume)?;
        let mask_rel = if let Some(mask) = &s.gt_mask {
            let rel = format!("masks/{}.svol", s.id);
            let mv = Volume::new(mask.mapv(|m| m as f32), s.volume.spacing, format!("{}_mask", s.id))?;
            save_volume(&dir.join(&rel), &mv)?;
            Some(rel)
        } else {
            None
        };
        let entry = ManifestEntry {
            id: s.id.clone(),
            patient: s.patient.clone(),
            side: s.side,
            label: s.label,
            anomaly_kind: s.anomaly_kind,
            volume: vol_rel,
            mask: mask_rel,
        };
        let line = serde_json::to_string(&entry)
            .map_err(|e| Error::Format { path: manifest_path.clone(), reason: e.to_string() })?;
        writeln!(out, "{}", line).map_err(|e| Error::io(&manifest_path, e))?;
    }
    Ok(manifest_path)
}

/// Read manifest entries without loading any volume data.
pub fn read_manifest(manifest: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(manifest).map_err(|e| Error::io(manifest, e))?;
    let reader = std::io::BufReader::new(file);
    let mut entries = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: manifest.to_path_buf(),
            reason: format!("line {}: {}", lineno + 1, e),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Load a dataset previously written by `write_dataset`.
pub fn load_dataset(manifest: &Path) -> Result<Vec<Sample>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|e| {
            let volume = load_volume(&base.join(&e.volume))?;
            let gt_mask = match &e.mask {
                Some(rel) => {
                    let mv = load_volume(&base.join(rel))?;
                    Some(mv.data.mapv(|x| (x > 0.5) as u8))
                }
                None => None,
            };
            Ok(Sample {
                id: e.id,
                patient: e.patient,
                side: e.side,
                label: e.label,
                anomaly_kind: e.anomaly_kind,
                volume,
                gt_mask,
            })
        })
        .collect()
}
