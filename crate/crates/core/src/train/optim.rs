//! Adaptive moment estimation.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::Params;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `p −= lr · wd · p`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f32> {
    cfg: AdamConfig,
    step: u64,
    m: IndexMap<String, Vec<T>>,
    v: IndexMap<String, Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient. Parameters absent
    /// from `grads` are left untouched (their moments do not advance).
    pub fn step(&mut self, params: &mut Params<T>, grads: &IndexMap<String, Tensor<T>>) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: wd,
        } = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::dim("adam", p.shape(), g.shape()));
            }
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let (tb1, tb2) = (T::of(b1), T::of(b2));
            let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
            let (tbc1, tbc2) = (T::of(bc1), T::of(bc2));
            let (tlr, teps, decay) = (T::of(lr), T::of(eps), T::of(lr * wd));
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = tb1 * *mi + ob1 * gi;
                *vi = tb2 * *vi + ob2 * gi * gi;
                let mhat = *mi / tbc1;
                let vhat = *vi / tbc2;
                *pi = *pi - tlr * mhat / (vhat.sqrt() + teps) - decay * *pi;
            }
        }
        Ok(())
    }
}
