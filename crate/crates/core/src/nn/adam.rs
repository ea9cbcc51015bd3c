use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use super::{Param, ParamVisitor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ArrayD<f32>,
    pub v: ArrayD<f32>,
}

/// Adam with bias correction, keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub state: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// Starts one update; feed every parameter through the returned visitor.
    pub fn begin(&mut self, lr: f64) -> AdamUpdate<'_> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.config.beta1.powi(t);
        let bc2 = 1.0 - self.config.beta2.powi(t);
        AdamUpdate {
            adam: self,
            lr,
            bc1,
            bc2,
        }
    }
}

pub struct AdamUpdate<'a> {
    adam: &'a mut Adam,
    lr: f64,
    bc1: f64,
    bc2: f64,
}

impl ParamVisitor for AdamUpdate<'_> {
    fn param(&mut self, name: &str, p: &mut Param) {
        let cfg = self.adam.config;
        let st = self
            .adam
            .state
            .entry(name.to_string())
            .or_insert_with(|| AdamState {
                m: ArrayD::zeros(p.value.raw_dim()),
                v: ArrayD::zeros(p.value.raw_dim()),
            });
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let step = (self.lr / self.bc1) as f32;
        let bc2_sqrt = self.bc2.sqrt() as f32;
        let eps = cfg.eps as f32;
        Zip::from(&mut p.value)
            .and(&p.grad)
            .and(&mut st.m)
            .and(&mut st.v)
            .for_each(|w, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step * *m / (v.sqrt() / bc2_sqrt + eps);
            });
    }
}
