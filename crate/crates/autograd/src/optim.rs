//! Adaptive moment estimation.

use crate::{GradBuffer, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction and optional L2 weight decay folded into the
/// gradient. Frozen parameters are skipped entirely, so their values stay
/// bit-identical.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &GradBuffer,
        lr: f64,
        frozen: &dyn Fn(ParamId) -> bool,
    ) {
        self.step += 1;
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if frozen(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let param = store.get_mut(id);
            let n = param.len();
            let m = self.first[id.index()].get_or_insert_with(|| vec![0.0; n]);
            let v = self.second[id.index()].get_or_insert_with(|| vec![0.0; n]);
            for (i, p) in param.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i] + weight_decay * *p;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
