use serde::{Deserialize, Serialize};

use super::{lit, ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers are kept in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Real = f64> {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = store
            .iter()
            .map(|p| vec![T::zero(); p.value.numel()])
            .collect();
        AdamW {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn apply(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>]) -> Result<()> {
        let c = self.config;
        if !(c.lr > 0.0) {
            return Err(Error::Parameter(format!(
                "learning rate must be positive, got {}",
                c.lr
            )));
        }
        if c.weight_decay < 0.0 || !(0.0..1.0).contains(&c.beta1) || !(0.0..1.0).contains(&c.beta2)
        {
            return Err(Error::Parameter(format!("invalid AdamW settings {c:?}")));
        }
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(Error::Dimension {
                op: "adamw",
                lhs: vec![store.len()],
                rhs: vec![grads.len()],
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2): (T, T) = (lit(c.beta1), lit(c.beta2));
        let (lr, wd, eps): (T, T, T) = (lit(c.lr), lit(c.weight_decay), lit(c.eps));
        let (bc1, bc2): (T, T) = (lit(bc1), lit(bc2));
        for (((p, g), m), v) in store
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            if g.len() != p.value.numel() || m.len() != g.len() {
                return Err(Error::Dimension {
                    op: "adamw",
                    lhs: p.value.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w - lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
            }
        }
        Ok(())
    }
}
