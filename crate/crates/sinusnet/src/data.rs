//! Batching glue between volumes and network tensors.

use ndarray::Array5;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::phantom::Sample;
use crate::seeding;
use crate::volume::Volume;

/// A volume stripped of its label for the unsupervised stages.
///
/// Pretraining APIs accept only this type, so label leakage into the
/// self-supervised pipeline is a compile error rather than a runtime bug.
#[derive(Debug, Clone)]
pub struct UnlabelledVolume {
    pub id: String,
    pub volume: Volume,
}

impl From<&Sample> for UnlabelledVolume {
    fn from(s: &Sample) -> Self {
        UnlabelledVolume { id: s.id.clone(), volume: s.volume.clone() }
    }
}

impl From<Volume> for UnlabelledVolume {
    fn from(volume: Volume) -> Self {
        UnlabelledVolume { id: volume.id.clone(), volume }
    }
}

/// Stack volumes into a `(B, 1, D, H, W)` f64 tensor.
pub fn stack_batch(volumes: &[&Volume]) -> Result<Array5<f64>> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::Argument("cannot stack an empty batch".into()))?;
    let (d, h, w) = first.shape();
    let mut out = Array5::zeros((volumes.len(), 1, d, h, w));
    for (bi, v) in volumes.iter().enumerate() {
        if v.shape() != (d, h, w) {
            return Err(Error::Dimension(format!(
                "volume {} has shape {:?} but the batch is {:?}",
                v.id,
                v.shape(),
                (d, h, w)
            )));
        }
        let mut slot = out.index_axis_mut(ndarray::Axis(0), bi);
        let mut slot = slot.index_axis_mut(ndarray::Axis(0), 0);
        ndarray::Zip::from(&mut slot).and(&v.data).for_each(|o, &x| *o = x as f64);
    }
    Ok(out)
}

/// Extract batch item `i` of a `(B, 1, D, H, W)` tensor as a volume,
/// mapping logits through the logistic function when `apply_sigmoid`.
pub fn tensor_item_to_volume(
    t: &Array5<f64>,
    i: usize,
    id: impl Into<String>,
    spacing: [f32; 3],
    apply_sigmoid: bool,
) -> Result<Volume> {
    let item = t.index_axis(ndarray::Axis(0), i);
    let item = item.index_axis(ndarray::Axis(0), 0);
    let data = if apply_sigmoid {
        item.mapv(|z| crate::nn::sigmoid(z) as f32)
    } else {
        item.mapv(|z| z as f32)
    };
    Volume::new(data.to_owned(), spacing, id)
}

/// Pick samples by id, in the order the ids are given.
///
/// A missing id is a split-integrity error: the caller's id lists come
/// from a split plan over this same dataset.
pub fn select_by_ids(samples: &[Sample], ids: &[String]) -> Result<Vec<Sample>> {
    let by_id: std::collections::BTreeMap<&str, &Sample> =
        samples.iter().map(|s| (s.id.as_str(), s)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|&s| s.clone())
                .ok_or_else(|| Error::Split(format!("id {id} is not in the dataset")))
        })
        .collect()
}

/// Deterministic shuffled batch index lists for one epoch.
///
/// The shuffle depends only on `(seed, epoch)`, never on prior epochs, so
/// training order is reproducible and resumable mid-run.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha12Rng::seed_from_u64(seeding::derive2(seed, epoch, 0xBA7C)));
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn stacking_preserves_values_and_order() {
        let a = Volume::new(Array3::from_elem((4, 4, 4), 0.25), [1.0; 3], "a").unwrap();
        let b = Volume::new(Array3::from_elem((4, 4, 4), 0.75), [1.0; 3], "b").unwrap();
        let t = stack_batch(&[&a, &b]).unwrap();
        assert_eq!(t.dim(), (2, 1, 4, 4, 4));
        assert_eq!(t[(0, 0, 1, 2, 3)], 0.25);
        assert_eq!(t[(1, 0, 0, 0, 0)], 0.75);
        let back = tensor_item_to_volume(&t, 1, "b2", [1.0; 3], false).unwrap();
        assert_eq!(back.data, b.data);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let a = Volume::zeros(4, "a");
        let b = Volume::zeros(8, "b");
        assert!(stack_batch(&[&a, &b]).is_err());
        assert!(stack_batch(&[]).is_err());
    }

    #[test]
    fn selection_by_id_preserves_order_and_flags_strangers() {
        use crate::phantom::{generate_dataset, PhantomConfig};
        let cfg = PhantomConfig {
            n_samples: 4,
            anomaly_fraction: 0.0,
            volume_size: 16,
            texture_noise_std: 0.02,
            seed: 1,
        };
        let data = generate_dataset(&cfg).unwrap();
        let ids = vec![data[2].id.clone(), data[0].id.clone()];
        let picked = select_by_ids(&data, &ids).unwrap();
        assert_eq!(picked.len(), 2);
        assert_eq!(picked[0].id, data[2].id);
        assert_eq!(picked[1].id, data[0].id);
        assert!(select_by_ids(&data, &["ghost".into()]).is_err());
    }

    #[test]
    fn epoch_batches_cover_everything_deterministically() {
        let a = epoch_batches(10, 3, 7, 0);
        let b = epoch_batches(10, 3, 7, 0);
        assert_eq!(a, b);
        let c = epoch_batches(10, 3, 7, 1);
        assert_ne!(a, c);
        let mut all: Vec<usize> = a.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(c.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
    }
}
