//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::model::net::{DescriptorNet, Gradients};

#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl AdamState {
    /// Canonical constants: β1=0.9, β2=0.999, ε=1e-8.
    pub fn new(net: &DescriptorNet) -> Self {
        let zeros = net.zero_gradients().tensors;
        AdamState {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update of the network parameters in place.
    pub fn adam_step(&mut self, net: &mut DescriptorNet, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.tensors.len() != self.first_moment.len() {
            return Err(Error::Shape("gradient layout vs optimizer state".into()));
        }
        for (t, g) in grads.tensors.iter().enumerate() {
            if g.len() != self.first_moment[t].len() {
                return Err(Error::Shape(format!("gradient tensor {t} size")));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in tensor {t}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (slot, g) in grads.tensors.iter().enumerate() {
            for (i, &gi) in g.iter().enumerate() {
                let m = &mut self.first_moment[slot][i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                let v = &mut self.second_moment[slot][i];
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
            }
        }
        let (m, v) = (&self.first_moment, &self.second_moment);
        let (eps, _b1) = (self.epsilon, self.beta1);
        net.apply_update(|slot, i, p| {
            let mhat = m[slot][i] / bc1;
            let vhat = v[slot][i] / bc2;
            p - lr * mhat / (vhat.sqrt() + eps)
        });
        Ok(())
    }
}
