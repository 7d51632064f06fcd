//! Adam.

use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, one buffer per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &impl ParamSet) -> Result<Self> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        let zeros: Vec<Vec<f64>> = params.arrays("").iter().map(|a| vec![0.0; a.data.len()]).collect();
        Ok(Self {
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// One bias-corrected update. `grads` follows `arrays_mut` order.
    pub fn update(&mut self, params: &mut impl ParamSet, grads: &[Vec<f64>]) -> Result<()> {
        let mut arrays = params.arrays_mut();
        if arrays.len() != grads.len() || arrays.len() != self.m.len() {
            return Err(Error::shape(
                "adam",
                format!("{} arrays, {} gradients, {} moment buffers", arrays.len(), grads.len(), self.m.len()),
            ));
        }
        for (i, (p, g)) in arrays.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::shape("adam", format!("array {i}: {} params, {} grads", p.len(), g.len())));
            }
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in array {i} at {j}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for ((p, g), (m, v)) in arrays.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for k in 0..p.len() {
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= self.lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}
