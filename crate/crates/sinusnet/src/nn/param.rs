//! Trainable parameters and the visitor plumbing shared by all layers.

use ndarray::ArrayD;

/// One trainable tensor with its gradient accumulator.
///
/// `decay` marks whether weight decay and trust-ratio adaptation apply;
/// biases and normalization affines opt out, matching the usual exclusion
/// list for large-batch optimizers.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub w: ArrayD<f64>,
    pub g: ArrayD<f64>,
    pub decay: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, w: ArrayD<f64>, decay: bool) -> Self {
        let g = ArrayD::zeros(w.raw_dim());
        Param { name: name.into(), w, g, decay }
    }

    pub fn zero_grad(&mut self) {
        self.g.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// Anything that owns parameters and persistent buffers.
///
/// Visitation order is declaration order and therefore stable, which makes
/// parameter names, checkpoint layout, and optimizer state deterministic.
pub trait Block {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param));

    /// Non-trainable state that still belongs in a checkpoint (running
    /// normalization statistics).
    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {}
}

/// Names of every parameter of a block, in visitation order.
pub fn param_names(block: &mut dyn Block) -> Vec<String> {
    let mut out = Vec::new();
    block.visit_params(&mut |p| out.push(p.name.clone()));
    out
}

/// Total number of scalar parameters in a block.
pub fn count_params(block: &mut dyn Block) -> usize {
    let mut n = 0;
    block.visit_params(&mut |p| n += p.len());
    n
}

/// Zero every gradient in a block.
pub fn zero_grads(block: &mut dyn Block) {
    block.visit_params(&mut |p| p.zero_grad());
}
