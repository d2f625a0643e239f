//! Convolutional autoencoder with a dense bottleneck.
//!
//! Encoder stages are strided 3x3x3 convs with batch norm and leaky ReLU;
//! the flattened bottleneck passes through two dense layers (down to the
//! latent code and back); decoder stages upsample trilinearly and convolve.
//! The final conv emits one logit channel, so reconstructions are
//! `sigmoid(logits)`.

use ndarray::{Array2, Array5, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::spec::CaeSpec;
use crate::error::Result;
use crate::nn::{Block, BatchNorm3d, Conv3d, LeakyRelu, LeakyRelu2d, Linear, Param, Upsample2x};

const SLOPE: f64 = 0.01;

struct EncStage {
    conv: Conv3d,
    bn: BatchNorm3d,
    act: LeakyRelu,
}

struct DecStage {
    up: Upsample2x,
    conv: Conv3d,
    bn: BatchNorm3d,
    act: LeakyRelu,
}

pub struct Cae {
    pub spec: CaeSpec,
    enc: Vec<EncStage>,
    fc_down: Linear,
    act_down: LeakyRelu2d,
    fc_up: Linear,
    act_up: LeakyRelu2d,
    dec: Vec<DecStage>,
    head: Conv3d,
}

impl Cae {
    pub fn new(spec: &CaeSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let n = spec.channels.len();
        let mut enc = Vec::with_capacity(n);
        let mut cin = 1usize;
        for (i, &cout) in spec.channels.iter().enumerate() {
            enc.push(EncStage {
                conv: Conv3d::new(&format!("enc{}.conv", i), cin, cout, 3, 2, 1, false, &mut rng),
                bn: BatchNorm3d::new(&format!("enc{}.bn", i), cout),
                act: LeakyRelu::new(SLOPE),
            });
            cin = cout;
        }
        let flat = spec.flat_dim();
        let fc_down = Linear::new("fc_down", flat, spec.latent_dim, true, &mut rng);
        let fc_up = Linear::new("fc_up", spec.latent_dim, flat, true, &mut rng);
        let mut dec = Vec::with_capacity(n);
        let mut prev = spec.channels[n - 1];
        for i in 0..n {
            let cout = if i + 1 < n { spec.channels[n - 2 - i] } else { spec.channels[0] };
            dec.push(DecStage {
                up: Upsample2x::new(),
                conv: Conv3d::new(&format!("dec{}.conv", i), prev, cout, 3, 1, 1, false, &mut rng),
                bn: BatchNorm3d::new(&format!("dec{}.bn", i), cout),
                act: LeakyRelu::new(SLOPE),
            });
            prev = cout;
        }
        let head = Conv3d::new("head", prev, 1, 3, 1, 1, true, &mut rng);
        Ok(Cae {
            spec: spec.clone(),
            enc,
            fc_down,
            act_down: LeakyRelu2d::new(SLOPE),
            fc_up,
            act_up: LeakyRelu2d::new(SLOPE),
            dec,
            head,
        })
    }

    /// Reconstruction logits, same shape as the input.
    pub fn forward(&mut self, x: &Array5<f64>, train: bool) -> Array5<f64> {
        let (b, _, _, _, _) = x.dim();
        let mut h = x.clone();
        for stage in &mut self.enc {
            h = stage.act.forward(&stage.bn.forward(&stage.conv.forward(&h, train), train), train);
        }
        let flat = self.spec.flat_dim();
        let h2 = h.into_shape_with_order((b, flat)).unwrap();
        let z = self.act_down.forward(&self.fc_down.forward(&h2, train), train);
        let h2 = self.act_up.forward(&self.fc_up.forward(&z, train), train);
        let s = self.spec.bottleneck_size();
        let c = *self.spec.channels.last().unwrap();
        let mut h = h2.into_shape_with_order((b, c, s, s, s)).unwrap();
        for stage in &mut self.dec {
            let u = stage.up.forward(&h, train);
            h = stage.act.forward(&stage.bn.forward(&stage.conv.forward(&u, train), train), train);
        }
        self.head.forward(&h, train)
    }

    /// Propagate a logit gradient back to the input.
    pub fn backward(&mut self, dlogits: &Array5<f64>) -> Array5<f64> {
        let mut d = self.head.backward(dlogits);
        for stage in self.dec.iter_mut().rev() {
            d = stage.up.backward(&stage.conv.backward(&stage.bn.backward(&stage.act.backward(&d))));
        }
        let (b, _, _, _, _) = d.dim();
        let flat = self.spec.flat_dim();
        let d2: Array2<f64> = d.into_shape_with_order((b, flat)).unwrap();
        let d2 = self.fc_up.backward(&self.act_up.backward(&d2));
        let d2 = self.fc_down.backward(&self.act_down.backward(&d2));
        let s = self.spec.bottleneck_size();
        let c = *self.spec.channels.last().unwrap();
        let mut d: Array5<f64> = d2.into_shape_with_order((b, c, s, s, s)).unwrap();
        for stage in self.enc.iter_mut().rev() {
            d = stage.conv.backward(&stage.bn.backward(&stage.act.backward(&d)));
        }
        d
    }
}

impl Block for Cae {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for s in &mut self.enc {
            s.conv.visit_params(f);
            s.bn.visit_params(f);
        }
        self.fc_down.visit_params(f);
        self.fc_up.visit_params(f);
        for s in &mut self.dec {
            s.conv.visit_params(f);
            s.bn.visit_params(f);
        }
        self.head.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        for s in &mut self.enc {
            s.bn.visit_buffers(f);
        }
        for s in &mut self.dec {
            s.bn.visit_buffers(f);
        }
    }
}
