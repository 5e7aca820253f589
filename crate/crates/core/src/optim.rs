//! Parameter updates. SGD is the default; Adam is available for experiments.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            Self::Sgd { lr } | Self::Adam { lr, .. } => lr,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    step: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies `grads` to every parameter accepted by `trainable`.
    /// Parameters without a gradient entry are left alone.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, trainable: impl Fn(&str) -> bool) {
        self.step += 1;
        let t = self.step as i32;
        for (name, p) in params.iter_mut() {
            if !trainable(name) {
                continue;
            }
            let Ok(g) = grads.get(name) else { continue };
            match self.cfg {
                OptimizerConfig::Sgd { lr } => p.scaled_add(-lr, g),
                OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                    let m = self.m.entry(name.to_string()).or_insert_with(|| Array2::zeros(g.raw_dim()));
                    let v = self.v.entry(name.to_string()).or_insert_with(|| Array2::zeros(g.raw_dim()));
                    m.zip_mut_with(g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
                    v.zip_mut_with(g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                        *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                    });
                }
            }
        }
    }
}
