//! Encoder plus MLP head for binary volume classification.

use ndarray::{Array2, Array5, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::resnet::ResEncoder3d;
use super::spec::ClassifierSpec;
use crate::error::Result;
use crate::nn::{Block, LeakyRelu2d, Linear, Param};

pub struct Classifier {
    pub spec: ClassifierSpec,
    pub encoder: ResEncoder3d,
    fc1: Linear,
    act: LeakyRelu2d,
    fc2: Linear,
}

impl Classifier {
    pub fn new(spec: &ClassifierSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let encoder = ResEncoder3d::new("enc", &spec.encoder, &mut rng);
        let fc1 = Linear::new("head.fc1", spec.head.in_dim, spec.head.hidden_dim, true, &mut rng);
        let fc2 = Linear::new("head.fc2", spec.head.hidden_dim, spec.head.n_classes, true, &mut rng);
        Ok(Classifier { spec: spec.clone(), encoder, fc1, act: LeakyRelu2d::relu(), fc2 })
    }

    /// Class logits `(B, n_classes)`.
    pub fn forward(&mut self, x: &Array5<f64>, train: bool) -> Array2<f64> {
        let feats = self.encoder.forward_features(x, train);
        let h = self.act.forward(&self.fc1.forward(&feats, train), train);
        self.fc2.forward(&h, train)
    }

    pub fn backward(&mut self, dlogits: &Array2<f64>) -> Array5<f64> {
        let d = self.fc1.backward(&self.act.backward(&self.fc2.backward(dlogits)));
        self.encoder.backward_features(&d)
    }
}

impl Block for Classifier {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_params(f);
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.encoder.visit_buffers(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::spec::{EncoderSpec, HeadSpec};
    use rand::Rng;

    fn micro_spec() -> ClassifierSpec {
        ClassifierSpec {
            encoder: EncoderSpec {
                input_size: 16,
                stem_channels: 4,
                stage_channels: vec![4, 8],
                blocks_per_stage: 1,
            },
            head: HeadSpec { in_dim: 8, hidden_dim: 6, n_classes: 2 },
        }
    }

    #[test]
    fn logits_have_class_shape() {
        let mut clf = Classifier::new(&micro_spec(), 0).unwrap();
        let x = Array5::zeros((3, 1, 16, 16, 16));
        let y = clf.forward(&x, false);
        assert_eq!(y.dim(), (3, 2));
    }

    #[test]
    fn backward_reaches_the_input() {
        let mut clf = Classifier::new(&micro_spec(), 1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = Array5::from_shape_fn((2, 1, 16, 16, 16), |_| rng.gen::<f64>());
        let y = clf.forward(&x, true);
        let dy = Array2::from_shape_fn(y.dim(), |_| rng.gen::<f64>() - 0.5);
        let dx = clf.backward(&dy);
        assert_eq!(dx.dim(), x.dim());
        assert!(dx.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn encoder_names_match_the_pretraining_model() {
        // weight transfer matches by name, so the encoder namespace must be
        // identical between the dense pretraining model and the classifier
        let mut clf = Classifier::new(&micro_spec(), 0).unwrap();
        let unet_spec = crate::models::spec::UnetSpec {
            encoder: micro_spec().encoder,
            use_skips: true,
        };
        let mut unet = crate::models::unet::UnetSsl::new(&unet_spec, 0).unwrap();
        let names = |b: &mut dyn Block| {
            let mut v = Vec::new();
            b.visit_params(&mut |p| {
                if p.name.starts_with("enc.") {
                    v.push(p.name.clone());
                }
            });
            v
        };
        assert_eq!(names(&mut clf), names(&mut unet));
    }
}
