//! Optimizers: full-model Adam for pretraining, masked Adam for tuning.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::Result;
use crate::matrix::Mat;
use crate::model::{FullGradients, GradientMap, MicroTransformer, ParameterUnitId};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

fn adam_update(w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr_t: f64) {
    for i in 0..w.len() {
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
        w[i] -= lr_t * m[i] / (v[i].sqrt() + EPS);
    }
}

fn bias_corrected_lr(lr: f64, t: usize) -> f64 {
    lr * (1.0 - BETA2.powi(t as i32)).sqrt() / (1.0 - BETA1.powi(t as i32))
}

/// Adam over the base tensors (embedding, positional table, head, and the
/// block matrices). Used by pretraining only; adapters stay untouched.
pub struct FullAdam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl FullAdam {
    pub fn new(model: &mut MicroTransformer) -> Self {
        let sizes: Vec<usize> = model.base_tensors_mut().iter().map(|m| m.len()).collect();
        FullAdam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut MicroTransformer, grads: &FullGradients, lr: f64) {
        self.t += 1;
        let lr_t = bias_corrected_lr(lr, self.t);
        let grad_tensors = base_grad_tensors(grads);
        for (((w, g), m), v) in model
            .base_tensors_mut()
            .into_iter()
            .zip(grad_tensors)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            adam_update(w.data_mut(), g.data(), m, v, lr_t);
        }
    }
}

/// Gradient tensors in the order of [`MicroTransformer::base_tensors_mut`].
fn base_grad_tensors(grads: &FullGradients) -> Vec<&Mat> {
    let mut out: Vec<&Mat> = vec![&grads.embedding, &grads.positional, &grads.head];
    for block in &grads.blocks {
        out.push(&block.wq);
        out.push(&block.wk);
        out.push(&block.wv);
        out.push(&block.wo);
        out.push(&block.w1_gate);
        out.push(&block.v_up);
        out.push(&block.w2_down);
    }
    out
}

/// Adam restricted to a unit mask; units outside the mask keep no state and
/// are never written.
pub struct MaskedAdam {
    m: BTreeMap<ParameterUnitId, Mat>,
    v: BTreeMap<ParameterUnitId, Mat>,
    t: usize,
}

impl MaskedAdam {
    pub fn new() -> Self {
        MaskedAdam { m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }

    pub fn step(
        &mut self,
        model: &mut MicroTransformer,
        grads: &GradientMap,
        mask: &BTreeSet<ParameterUnitId>,
        lr: f64,
    ) -> Result<()> {
        if lr == 0.0 {
            return Ok(());
        }
        self.t += 1;
        let lr_t = bias_corrected_lr(lr, self.t);
        for &id in mask {
            let grad = grads
                .get(&id)
                .ok_or_else(|| crate::error::Error::Internal(format!("no gradient for {id}")))?;
            let shape = grad.shape();
            let m = self.m.entry(id).or_insert_with(|| Mat::zeros(shape.0, shape.1));
            let v = self.v.entry(id).or_insert_with(|| Mat::zeros(shape.0, shape.1));
            let w = model.unit_mut(id)?;
            adam_update(w.data_mut(), grad.data(), m.data_mut(), v.data_mut(), lr_t);
        }
        Ok(())
    }
}

impl Default for MaskedAdam {
    fn default() -> Self {
        Self::new()
    }
}
