use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam with bias-corrected moments, stored per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ParamSet<f32>, grads: &[Vec<f32>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::Usage("gradient list does not match the optimizer state".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let (b1, b2) = (BETA1 as f32, BETA2 as f32);
        for (((entry, g), m), v) in params.entries_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let w = entry.value.data_mut();
            if g.len() != w.len() {
                return Err(Error::Usage(format!("gradient for {} has the wrong length", entry.name)));
            }
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] as f64 / c1;
                let v_hat = v[i] as f64 / c2;
                w[i] -= (lr * m_hat / (v_hat.sqrt() + EPS)) as f32;
            }
        }
        Ok(())
    }
}
