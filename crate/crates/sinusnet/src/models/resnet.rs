//! Residual 3D encoder.
//!
//! A strided stem conv is followed by stages of basic residual blocks
//! (two 3x3x3 convs with batch norm; identity or projected shortcut).
//! The first block of every stage downsamples by 2. Features are the
//! global average pool of the last stage.

use ndarray::{Array2, Array5, ArrayD};
use rand_chacha::ChaCha12Rng;

use super::spec::EncoderSpec;
use crate::nn::{Block, BatchNorm3d, Conv3d, GlobalAvgPool, LeakyRelu, Param};

struct BasicBlock {
    conv1: Conv3d,
    bn1: BatchNorm3d,
    act1: LeakyRelu,
    conv2: Conv3d,
    bn2: BatchNorm3d,
    shortcut: Option<(Conv3d, BatchNorm3d)>,
    act_out: LeakyRelu,
}

impl BasicBlock {
    fn new(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha12Rng) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv3d::new(&format!("{}.short.conv", name), cin, cout, 1, stride, 0, false, rng),
                BatchNorm3d::new(&format!("{}.short.bn", name), cout),
            )
        });
        BasicBlock {
            conv1: Conv3d::new(&format!("{}.conv1", name), cin, cout, 3, stride, 1, false, rng),
            bn1: BatchNorm3d::new(&format!("{}.bn1", name), cout),
            act1: LeakyRelu::relu(),
            conv2: Conv3d::new(&format!("{}.conv2", name), cout, cout, 3, 1, 1, false, rng),
            bn2: BatchNorm3d::new(&format!("{}.bn2", name), cout),
            shortcut,
            act_out: LeakyRelu::relu(),
        }
    }

    fn forward(&mut self, x: &Array5<f64>, train: bool) -> Array5<f64> {
        let mut main = self.conv1.forward(x, train);
        main = self.bn1.forward(&main, train);
        main = self.act1.forward(&main, train);
        main = self.conv2.forward(&main, train);
        main = self.bn2.forward(&main, train);
        let skip = match &mut self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x, train), train),
            None => x.clone(),
        };
        self.act_out.forward(&(main + skip), train)
    }

    fn backward(&mut self, dy: &Array5<f64>) -> Array5<f64> {
        let d = self.act_out.backward(dy);
        let mut dmain = self.bn2.backward(&d);
        dmain = self.conv2.backward(&dmain);
        dmain = self.act1.backward(&dmain);
        dmain = self.bn1.backward(&dmain);
        dmain = self.conv1.backward(&dmain);
        let dskip = match &mut self.shortcut {
            Some((conv, bn)) => conv.backward(&bn.backward(&d)),
            None => d,
        };
        dmain + dskip
    }
}

impl Block for BasicBlock {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
        if let Some((conv, bn)) = &mut self.shortcut {
            conv.visit_params(f);
            bn.visit_params(f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.bn1.visit_buffers(f);
        self.bn2.visit_buffers(f);
        if let Some((_, bn)) = &mut self.shortcut {
            bn.visit_buffers(f);
        }
    }
}

pub struct ResEncoder3d {
    pub spec: EncoderSpec,
    stem_conv: Conv3d,
    stem_bn: BatchNorm3d,
    stem_act: LeakyRelu,
    stages: Vec<Vec<BasicBlock>>,
    pool: GlobalAvgPool,
}

impl ResEncoder3d {
    /// `prefix` namespaces parameter names so pretrained encoder weights
    /// can be matched by name into another model holding the same encoder.
    pub fn new(prefix: &str, spec: &EncoderSpec, rng: &mut ChaCha12Rng) -> Self {
        let stem_conv =
            Conv3d::new(&format!("{}.stem.conv", prefix), 1, spec.stem_channels, 3, 2, 1, false, rng);
        let stem_bn = BatchNorm3d::new(&format!("{}.stem.bn", prefix), spec.stem_channels);
        let mut stages = Vec::with_capacity(spec.stage_channels.len());
        let mut cin = spec.stem_channels;
        for (si, &cout) in spec.stage_channels.iter().enumerate() {
            let mut blocks = Vec::with_capacity(spec.blocks_per_stage);
            for bi in 0..spec.blocks_per_stage {
                let stride = if bi == 0 { 2 } else { 1 };
                let name = format!("{}.s{}.b{}", prefix, si, bi);
                blocks.push(BasicBlock::new(&name, cin, cout, stride, rng));
                cin = cout;
            }
            stages.push(blocks);
        }
        ResEncoder3d {
            spec: spec.clone(),
            stem_conv,
            stem_bn,
            stem_act: LeakyRelu::relu(),
            stages,
            pool: GlobalAvgPool::new(),
        }
    }

    /// Outputs of the stem and of every stage, shallowest first. The last
    /// entry is the bottleneck.
    pub fn forward_stages(&mut self, x: &Array5<f64>, train: bool) -> Vec<Array5<f64>> {
        let mut taps = Vec::with_capacity(self.stages.len() + 1);
        let mut h = self.stem_act.forward(
            &self.stem_bn.forward(&self.stem_conv.forward(x, train), train),
            train,
        );
        taps.push(h.clone());
        for stage in &mut self.stages {
            for block in stage.iter_mut() {
                h = block.forward(&h, train);
            }
            taps.push(h.clone());
        }
        taps
    }

    /// Backward for the staged forward. `skip_grads` holds extra gradient
    /// flowing into each tap except the bottleneck (same order as
    /// `forward_stages`), from consumers like a decoder with skip paths.
    pub fn backward_stages(
        &mut self,
        d_bottleneck: Array5<f64>,
        mut skip_grads: Vec<Option<Array5<f64>>>,
    ) -> Array5<f64> {
        assert_eq!(
            skip_grads.len(),
            self.stages.len(),
            "need one optional skip gradient per tap below the bottleneck"
        );
        let mut d = d_bottleneck;
        for (si, stage) in self.stages.iter_mut().enumerate().rev() {
            for block in stage.iter_mut().rev() {
                d = block.backward(&d);
            }
            if let Some(extra) = skip_grads[si].take() {
                d += &extra;
            }
        }
        let d = self.stem_act.backward(&d);
        let d = self.stem_bn.backward(&d);
        self.stem_conv.backward(&d)
    }

    /// Pooled feature vector `(B, feature_dim)`.
    pub fn forward_features(&mut self, x: &Array5<f64>, train: bool) -> Array2<f64> {
        let mut h = self.stem_act.forward(
            &self.stem_bn.forward(&self.stem_conv.forward(x, train), train),
            train,
        );
        for stage in &mut self.stages {
            for block in stage.iter_mut() {
                h = block.forward(&h, train);
            }
        }
        self.pool.forward(&h, train)
    }

    pub fn backward_features(&mut self, dfeat: &Array2<f64>) -> Array5<f64> {
        let d = self.pool.backward(dfeat);
        let skip_grads = vec![None; self.stages.len()];
        self.backward_stages(d, skip_grads)
    }
}

impl Block for ResEncoder3d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem_conv.visit_params(f);
        self.stem_bn.visit_params(f);
        for stage in &mut self.stages {
            for block in stage.iter_mut() {
                block.visit_params(f);
            }
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.stem_bn.visit_buffers(f);
        for stage in &mut self.stages {
            for block in stage.iter_mut() {
                block.visit_buffers(f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param_names;
    use rand::{Rng, SeedableRng};

    fn micro_spec() -> EncoderSpec {
        EncoderSpec {
            input_size: 16,
            stem_channels: 4,
            stage_channels: vec![4, 8, 16],
            blocks_per_stage: 1,
        }
    }

    #[test]
    fn stage_shapes_follow_the_spec() {
        let spec = micro_spec();
        let mut enc = ResEncoder3d::new("enc", &spec, &mut ChaCha12Rng::seed_from_u64(0));
        let x = Array5::zeros((1, 1, 16, 16, 16));
        let taps = enc.forward_stages(&x, false);
        assert_eq!(taps.len(), 4);
        assert_eq!(taps[0].dim(), (1, 4, 8, 8, 8));
        assert_eq!(taps[1].dim(), (1, 4, 4, 4, 4));
        assert_eq!(taps[2].dim(), (1, 8, 2, 2, 2));
        assert_eq!(taps[3].dim(), (1, 16, 1, 1, 1));
        let feats = enc.forward_features(&x, false);
        assert_eq!(feats.dim(), (1, 16));
    }

    #[test]
    fn feature_backward_has_input_shape() {
        let spec = micro_spec();
        let mut enc = ResEncoder3d::new("enc", &spec, &mut ChaCha12Rng::seed_from_u64(1));
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = Array5::from_shape_fn((2, 1, 16, 16, 16), |_| rng.gen::<f64>());
        let f = enc.forward_features(&x, true);
        let df = Array2::from_shape_fn(f.dim(), |_| rng.gen::<f64>() - 0.5);
        let dx = enc.backward_features(&df);
        assert_eq!(dx.dim(), x.dim());
        assert!(dx.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn staged_backward_accepts_skip_gradients() {
        let spec = micro_spec();
        let mut enc = ResEncoder3d::new("enc", &spec, &mut ChaCha12Rng::seed_from_u64(3));
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x = Array5::from_shape_fn((1, 1, 16, 16, 16), |_| rng.gen::<f64>());
        let taps = enc.forward_stages(&x, true);
        let d_last = Array5::from_elem(taps[3].dim(), 0.1);
        let skips = vec![
            Some(Array5::from_elem(taps[0].dim(), 0.1)),
            None,
            Some(Array5::from_elem(taps[2].dim(), 0.1)),
        ];
        let dx = enc.backward_stages(d_last, skips);
        assert_eq!(dx.dim(), x.dim());
    }

    #[test]
    fn names_carry_the_prefix() {
        let spec = micro_spec();
        let mut enc = ResEncoder3d::new("enc", &spec, &mut ChaCha12Rng::seed_from_u64(0));
        let names = param_names(&mut enc);
        assert!(names.iter().all(|n| n.starts_with("enc.")));
        assert!(names.iter().any(|n| n == "enc.stem.conv.weight"));
        assert!(names.iter().any(|n| n == "enc.s2.b0.short.conv.weight"));
    }
}
