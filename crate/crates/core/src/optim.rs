//! Adam over the trainable tensors of a [`ModelState`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |b: f64| (0.0..1.0).contains(&b);
        if !ok(self.beta1) || !ok(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::param("schedule.adam", "betas in [0, 1), eps > 0"));
        }
        Ok(())
    }
}

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    t: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64, cfg: AdamConfig) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::param("schedule.learning_rate", "must be positive"));
        }
        cfg.validate()?;
        Ok(Adam { cfg, lr, t: 0, moments: BTreeMap::new() })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Drop all moment estimates and the bias-correction step count.
    pub fn reset(&mut self) {
        self.t = 0;
        self.moments.clear();
    }

    /// Apply one update. Gradients of frozen or unknown tensors are ignored,
    /// so frozen weights stay bit-identical.
    pub fn step(&mut self, state: &mut ModelState, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.cfg.eps * c2.sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for (name, g) in grads {
            let Some(p) = state.params_mut().get_mut(name) else {
                continue;
            };
            if !p.trainable {
                continue;
            }
            let n = p.value.len();
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(mom.m.iter_mut())
                .zip(mom.v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Element-wise sum of gradient maps into `acc`.
pub fn accumulate_grads(acc: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>) {
    for (k, g) in grads {
        match acc.get_mut(&k) {
            Some(a) => a.add_assign(&g),
            None => {
                acc.insert(k, g);
            }
        }
    }
}
