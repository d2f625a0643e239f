//! Architecture specifications.
//!
//! A spec fully determines a model's shape; its canonical JSON (and the
//! SHA-256 of that JSON) is embedded in checkpoints so weights can never be
//! loaded into a mismatched architecture. Width and depth are spec fields,
//! which is what lets the test suite run scaled-down variants of the exact
//! same code paths used at full size.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Convolutional autoencoder with a dense latent bottleneck.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaeSpec {
    /// Cubic input edge length.
    pub input_size: usize,
    /// Encoder channel widths; each stage halves the spatial extent.
    pub channels: Vec<usize>,
    pub latent_dim: usize,
}

impl Default for CaeSpec {
    fn default() -> Self {
        CaeSpec { input_size: 64, channels: vec![16, 32, 64, 128, 256], latent_dim: 512 }
    }
}

impl CaeSpec {
    /// Spatial edge length at the bottleneck.
    pub fn bottleneck_size(&self) -> usize {
        self.input_size >> self.channels.len()
    }

    /// Flattened feature count at the bottleneck.
    pub fn flat_dim(&self) -> usize {
        let s = self.bottleneck_size();
        self.channels.last().copied().unwrap_or(0) * s * s * s
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("autoencoder needs at least one stage".into()));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("autoencoder channel widths must be positive".into()));
        }
        let div = 1usize << self.channels.len();
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 2^{} stages",
                self.input_size,
                self.channels.len()
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Residual 3D encoder: strided stem, then stages of two-conv residual
/// blocks whose first block downsamples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_size: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            input_size: 64,
            stem_channels: 64,
            stage_channels: vec![64, 128, 256, 512],
            blocks_per_stage: 2,
        }
    }
}

impl EncoderSpec {
    /// Dimension of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        self.stage_channels.last().copied().unwrap_or(self.stem_channels)
    }

    /// Spatial edge length after the stem and each stage.
    pub fn stage_sizes(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.stage_channels.len() + 1);
        let mut s = self.input_size / 2;
        out.push(s);
        for _ in &self.stage_channels {
            s /= 2;
            out.push(s);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        if self.stem_channels == 0 || self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("encoder channel widths must be positive".into()));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be >= 1".into()));
        }
        let div = 1usize << (1 + self.stage_channels.len());
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of {} (stem + {} stages each halve it)",
                self.input_size,
                div,
                self.stage_channels.len()
            )));
        }
        Ok(())
    }
}

/// Encoder plus upsampling decoder for dense reconstruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnetSpec {
    pub encoder: EncoderSpec,
    /// Concatenate encoder stage outputs into the decoder. Disabling this
    /// narrows the decoder convs to the upsampled channels alone.
    pub use_skips: bool,
}

impl Default for UnetSpec {
    fn default() -> Self {
        UnetSpec { encoder: EncoderSpec::default(), use_skips: true }
    }
}

impl UnetSpec {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()
    }
}

/// Classification head: one hidden layer onto class logits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
}

impl Default for HeadSpec {
    fn default() -> Self {
        HeadSpec { in_dim: 512, hidden_dim: 256, n_classes: 2 }
    }
}

impl HeadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.hidden_dim == 0 || self.n_classes < 2 {
            return Err(Error::Config(format!(
                "head dims must be positive with >= 2 classes, got {:?}",
                self
            )));
        }
        Ok(())
    }
}

/// Encoder + head used for supervised fine-tuning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub encoder: EncoderSpec,
    pub head: HeadSpec,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        let encoder = EncoderSpec::default();
        let head = HeadSpec { in_dim: encoder.feature_dim(), ..Default::default() };
        ClassifierSpec { encoder, head }
    }
}

impl ClassifierSpec {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        if self.head.in_dim != self.encoder.feature_dim() {
            return Err(Error::Config(format!(
                "head expects {} features but the encoder produces {}",
                self.head.in_dim,
                self.encoder.feature_dim()
            )));
        }
        Ok(())
    }
}

/// Canonical JSON for a spec; field order is declaration order, so the
/// encoding is stable.
pub fn spec_json<T: Serialize>(spec: &T) -> String {
    serde_json::to_string(spec).expect("spec serialization cannot fail")
}

/// Hex SHA-256 of the canonical spec JSON.
pub fn spec_hash<T: Serialize>(spec: &T) -> String {
    let mut hasher = Sha256::new();
    hasher.update(spec_json(spec).as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{:02x}", b)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_cae_shape_chain() {
        let s = CaeSpec::default();
        s.validate().unwrap();
        assert_eq!(s.bottleneck_size(), 2);
        assert_eq!(s.flat_dim(), 256 * 8);
    }

    #[test]
    fn default_encoder_shape_chain() {
        let s = EncoderSpec::default();
        s.validate().unwrap();
        assert_eq!(s.stage_sizes(), vec![32, 16, 8, 4, 2]);
        assert_eq!(s.feature_dim(), 512);
    }

    #[test]
    fn micro_variants_validate() {
        CaeSpec { input_size: 32, channels: vec![8, 16, 32, 64], latent_dim: 64 }
            .validate()
            .unwrap();
        EncoderSpec {
            input_size: 16,
            stem_channels: 8,
            stage_channels: vec![8, 16, 32],
            blocks_per_stage: 1,
        }
        .validate()
        .unwrap();
    }

    #[test]
    fn indivisible_input_is_rejected() {
        assert!(CaeSpec { input_size: 48, channels: vec![16; 5], latent_dim: 8 }
            .validate()
            .is_err());
        assert!(EncoderSpec {
            input_size: 20,
            stem_channels: 8,
            stage_channels: vec![8, 16],
            blocks_per_stage: 1,
        }
        .validate()
        .is_err());
    }

    #[test]
    fn mismatched_head_is_rejected() {
        let mut c = ClassifierSpec::default();
        c.head.in_dim = 100;
        assert!(c.validate().is_err());
    }

    #[test]
    fn spec_hash_is_stable_and_sensitive() {
        let a = CaeSpec::default();
        let mut b = CaeSpec::default();
        assert_eq!(spec_hash(&a), spec_hash(&b));
        b.latent_dim = 513;
        assert_ne!(spec_hash(&a), spec_hash(&b));
        assert_eq!(spec_hash(&a).len(), 64);
    }
}
