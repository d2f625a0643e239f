//! Optimizers with layer-wise adaptive scaling (LARS) and AdamW.
//!
//! Both keep per-parameter state keyed by parameter name, so a rebuilt
//! model with the same architecture resumes deterministically. Parameters
//! flagged `decay = false` (biases, normalization affines) are excluded
//! from weight decay, and LARS additionally skips trust-ratio adaptation
//! for them, applying plain SGD with momentum instead.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::param::{Block, Param};

/// Layer-wise adaptive rate scaling over SGD with momentum.
pub struct Lars {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Trust coefficient for the local learning rate.
    pub trust: f64,
    pub eps: f64,
    velocity: BTreeMap<String, ArrayD<f64>>,
}

impl Lars {
    pub fn new(weight_decay: f64) -> Self {
        Lars { momentum: 0.9, weight_decay, trust: 1e-3, eps: 1e-9, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, block: &mut dyn Block, lr: f64) {
        block.visit_params(&mut |p| self.update(p, lr));
    }

    fn update(&mut self, p: &mut Param, lr: f64) {
        let v = self
            .velocity
            .entry(p.name.clone())
            .or_insert_with(|| ArrayD::zeros(p.w.raw_dim()));
        if p.decay {
            let mut update = p.g.clone();
            update.scaled_add(self.weight_decay, &p.w);
            let w_norm = l2_norm(&p.w);
            let g_norm = l2_norm(&update);
            let local = if w_norm > 0.0 && g_norm > 0.0 {
                self.trust * w_norm / (g_norm + self.eps)
            } else {
                1.0
            };
            v.zip_mut_with(&update, |vv, &uv| *vv = self.momentum * *vv + lr * local * uv);
        } else {
            v.zip_mut_with(&p.g, |vv, &gv| *vv = self.momentum * *vv + lr * gv);
        }
        p.w.zip_mut_with(v, |wv, &vv| *wv -= vv);
    }
}

/// Adam with decoupled weight decay.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, block: &mut dyn Block, lr: f64) {
        self.t += 1;
        let t = self.t;
        block.visit_params(&mut |p| {
            let m = self
                .m
                .entry(p.name.clone())
                .or_insert_with(|| ArrayD::zeros(p.w.raw_dim()));
            let v = self
                .v
                .entry(p.name.clone())
                .or_insert_with(|| ArrayD::zeros(p.w.raw_dim()));
            let bc1 = 1.0 - self.beta1.powi(t as i32);
            let bc2 = 1.0 - self.beta2.powi(t as i32);
            m.zip_mut_with(&p.g, |mv, &gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            v.zip_mut_with(&p.g, |vv, &gv| *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv);
            let decay = if p.decay { self.weight_decay } else { 0.0 };
            ndarray::Zip::from(&mut p.w).and(&*m).and(&*v).for_each(|wv, &mv, &vv| {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *wv -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * *wv);
            });
        });
    }
}

fn l2_norm(a: &ArrayD<f64>) -> f64 {
    a.iter().map(|&v| v * v).sum::<f64>().sqrt()
}
