//! AdamW: Adam with decoupled weight decay.
//!
//! Per parameter, with step counter `t` starting at 1:
//!
//! ```text
//! w <- w (1 - lr wd)
//! m <- b1 m + (1 - b1) g
//! v <- b2 v + (1 - b2) g^2
//! w <- w - lr (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
//! ```

use serde::{Deserialize, Serialize};

use super::{DenseNetwork, ParamBuffer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: ParamBuffer,
    pub second_moment: ParamBuffer,
}

impl AdamW {
    pub fn new(net: &DenseNetwork, config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: ParamBuffer::zeros_like(net),
            second_moment: ParamBuffer::zeros_like(net),
        }
    }

    pub fn step(&mut self, net: &mut DenseNetwork, grads: &ParamBuffer) -> Result<()> {
        let shapes_match = net
            .params()
            .slices()
            .zip(grads.slices())
            .all(|(a, b)| a.len() == b.len())
            && grads.slices().count() == self.first_moment.slices().count();
        if !shapes_match {
            return Err(Error::invalid("gradient shapes do not match the network"));
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for (((w, g), m), v) in net
            .param_slices_mut()
            .zip(grads.slices())
            .zip(self.first_moment.slices_mut())
            .zip(self.second_moment.slices_mut())
        {
            for i in 0..w.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] = w[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
