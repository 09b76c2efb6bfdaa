use serde::{Deserialize, Serialize};

use super::Element;
use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied only to parameters of rank >= 2.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 6e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with one moment slot per parameter of the store it was built for.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Element> AdamW<S> {
    pub fn new(store: &ParamStore<S>, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![S::zero(); p.value.numel()]).collect::<Vec<_>>();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter that has a gradient. Frozen
    /// parameters and parameters without gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &Gradients<S>) -> Result<()> {
        if store.len() != self.m.len() || grads.len() != store.len() {
            return Err(Error::State(format!(
                "optimizer holds {} slots but store has {} parameters and {} gradients",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = S::from_f64(1.0 - c.beta1.powi(t));
        let bc2 = S::from_f64(1.0 - c.beta2.powi(t));
        let (b1, b2) = (S::from_f64(c.beta1), S::from_f64(c.beta2));
        let (lr, eps) = (S::from_f64(c.lr), S::from_f64(c.eps));
        for (id, p) in store.iter_mut() {
            if !p.requires_grad {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let decay = if p.value.ndim() >= 2 {
                S::from_f64(c.lr * c.weight_decay)
            } else {
                S::zero()
            };
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            for (((w, &gv), mv), vv) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (S::one() - b1) * gv;
                *vv = b2 * *vv + (S::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *w = *w - decay * *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
