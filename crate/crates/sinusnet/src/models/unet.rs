//! Encoder-decoder for dense volume-to-volume prediction.
//!
//! The decoder mirrors the encoder: each stage trilinearly doubles the
//! spatial extent, optionally concatenates the matching encoder tap, and
//! applies a 3x3x3 conv with batch norm and ReLU. A final upsample brings
//! the map back to input resolution, and a conv head emits one logit
//! channel. Dropping the decoder leaves a plain feature encoder, which is
//! exactly what fine-tuning reuses.

use ndarray::{s, Array5, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::resnet::ResEncoder3d;
use super::spec::UnetSpec;
use crate::error::Result;
use crate::nn::{Block, BatchNorm3d, Conv3d, LeakyRelu, Param, Upsample2x};

struct DecStage {
    up: Upsample2x,
    conv: Conv3d,
    bn: BatchNorm3d,
    act: LeakyRelu,
    /// Channels coming from below (the upsampled path), used to split the
    /// concatenated gradient.
    up_channels: usize,
}

/// Channel-wise concatenation in standard layout (ndarray's `concatenate`
/// leaves the concat axis outermost in memory, which the im2col path in the
/// convolutions cannot slice).
fn concat_channels(a: &Array5<f64>, b: &Array5<f64>) -> Array5<f64> {
    let (ba, ca, d, h, w) = a.dim();
    let cb = b.dim().1;
    let mut out = Array5::zeros((ba, ca + cb, d, h, w));
    out.slice_mut(s![.., ..ca, .., .., ..]).assign(a);
    out.slice_mut(s![.., ca.., .., .., ..]).assign(b);
    out
}

pub struct UnetSsl {
    pub spec: UnetSpec,
    pub encoder: ResEncoder3d,
    dec: Vec<DecStage>,
    final_up: Upsample2x,
    head: Conv3d,
}

impl UnetSsl {
    pub fn new(spec: &UnetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let encoder = ResEncoder3d::new("enc", &spec.encoder, &mut rng);
        let chans = &spec.encoder.stage_channels;
        let n = chans.len();
        let mut dec = Vec::with_capacity(n);
        let mut prev = chans[n - 1];
        for i in 0..n {
            // the skip for decoder stage i is the tap with matching spatial
            // size: stage n-2-i for the early stages, then the stem
            let skip_ch = if i + 1 < n { chans[n - 2 - i] } else { spec.encoder.stem_channels };
            let cout = skip_ch;
            let cin = prev + if spec.use_skips { skip_ch } else { 0 };
            dec.push(DecStage {
                up: Upsample2x::new(),
                conv: Conv3d::new(&format!("dec{}.conv", i), cin, cout, 3, 1, 1, false, &mut rng),
                bn: BatchNorm3d::new(&format!("dec{}.bn", i), cout),
                act: LeakyRelu::relu(),
                up_channels: prev,
            });
            prev = cout;
        }
        let head = Conv3d::new("head", prev, 1, 3, 1, 1, true, &mut rng);
        Ok(UnetSsl { spec: spec.clone(), encoder, dec, final_up: Upsample2x::new(), head })
    }

    /// Dense logits with the input's shape.
    pub fn forward(&mut self, x: &Array5<f64>, train: bool) -> Array5<f64> {
        let taps = self.encoder.forward_stages(x, train);
        let n = self.dec.len();
        let mut h = taps[n].clone();
        for (i, stage) in self.dec.iter_mut().enumerate() {
            let u = stage.up.forward(&h, train);
            let cat = if self.spec.use_skips {
                concat_channels(&u, &taps[n - 1 - i])
            } else {
                u
            };
            h = stage.act.forward(&stage.bn.forward(&stage.conv.forward(&cat, train), train), train);
        }
        let h = self.final_up.forward(&h, train);
        self.head.forward(&h, train)
    }

    /// Backward from a logit gradient to the input gradient.
    pub fn backward(&mut self, dlogits: &Array5<f64>) -> Array5<f64> {
        let d = self.head.backward(dlogits);
        let mut d = self.final_up.backward(&d);
        let n = self.dec.len();
        let mut skip_grads: Vec<Option<Array5<f64>>> = vec![None; n];
        for (i, stage) in self.dec.iter_mut().enumerate().rev() {
            let dcat = stage.conv.backward(&stage.bn.backward(&stage.act.backward(&d)));
            let dup = if self.spec.use_skips {
                let dup = dcat.slice_axis(Axis(1), (0..stage.up_channels).into()).to_owned();
                let dskip = dcat.slice_axis(Axis(1), (stage.up_channels..dcat.dim().1).into());
                skip_grads[n - 1 - i] = Some(dskip.to_owned());
                dup
            } else {
                dcat
            };
            d = stage.up.backward(&dup);
        }
        self.encoder.backward_stages(d, skip_grads)
    }
}

impl Block for UnetSsl {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_params(f);
        for s in &mut self.dec {
            s.conv.visit_params(f);
            s.bn.visit_params(f);
        }
        self.head.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.encoder.visit_buffers(f);
        for s in &mut self.dec {
            s.bn.visit_buffers(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::spec::EncoderSpec;
    use rand::Rng;

    fn micro_spec(use_skips: bool) -> UnetSpec {
        UnetSpec {
            encoder: EncoderSpec {
                input_size: 16,
                stem_channels: 4,
                stage_channels: vec![4, 8],
                blocks_per_stage: 1,
            },
            use_skips,
        }
    }

    #[test]
    fn output_matches_input_shape() {
        for skips in [true, false] {
            let mut net = UnetSsl::new(&micro_spec(skips), 0).unwrap();
            let x = Array5::zeros((1, 1, 16, 16, 16));
            let y = net.forward(&x, false);
            assert_eq!(y.dim(), x.dim(), "use_skips = {}", skips);
        }
    }

    #[test]
    fn backward_works_with_and_without_skips() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for skips in [true, false] {
            let mut net = UnetSsl::new(&micro_spec(skips), 2).unwrap();
            let x = Array5::from_shape_fn((1, 1, 16, 16, 16), |_| rng.gen::<f64>());
            let y = net.forward(&x, true);
            let dx = net.backward(&y);
            assert_eq!(dx.dim(), x.dim());
            assert!(dx.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn skip_setting_changes_decoder_width_not_encoder() {
        let mut with = UnetSsl::new(&micro_spec(true), 0).unwrap();
        let mut without = UnetSsl::new(&micro_spec(false), 0).unwrap();
        let count = |net: &mut UnetSsl| {
            let mut enc = 0;
            let mut dec = 0;
            net.visit_params(&mut |p| {
                if p.name.starts_with("enc.") {
                    enc += p.len();
                } else {
                    dec += p.len();
                }
            });
            (enc, dec)
        };
        let (enc_w, dec_w) = count(&mut with);
        let (enc_wo, dec_wo) = count(&mut without);
        assert_eq!(enc_w, enc_wo);
        assert!(dec_w > dec_wo);
    }
}
