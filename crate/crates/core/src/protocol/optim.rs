use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Params;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `p -= lr · wd · p`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(params: &Params) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> =
            params.iter().map(|(k, t)| (k.to_string(), vec![0.0; t.numel()])).collect();
        Adam {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(
        &mut self,
        params: &mut Params,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = match (self.m.get_mut(name), self.v.get_mut(name)) {
                (Some(m), Some(v)) if m.len() == g.len() && v.len() == g.len() => (m, v),
                _ => return Err(Error::contract(format!("optimizer state out of sync for {name}"))),
            };
            if p.numel() != g.len() {
                return Err(Error::contract(format!("gradient size mismatch for {name}")));
            }
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *x);
            }
        }
        Ok(())
    }

    /// Widens the classifier moments from `old` to `new` columns (rows of width `d`).
    pub fn grow_classifier(&mut self, d: usize, old: usize, new: usize) {
        for store in [&mut self.m, &mut self.v] {
            if let Some(w) = store.get_mut("head.cls.w") {
                let mut grown = Vec::with_capacity(d * new);
                for r in 0..d {
                    grown.extend_from_slice(&w[r * old..(r + 1) * old]);
                    grown.extend(std::iter::repeat_n(0.0, new - old));
                }
                *w = grown;
            }
            if let Some(b) = store.get_mut("head.cls.b") {
                b.resize(new, 0.0);
            }
        }
    }
}
