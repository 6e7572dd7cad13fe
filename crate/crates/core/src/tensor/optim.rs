use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParameterSet, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn moments(&self, path: &str) -> Option<(&[f64], &[f64])> {
        Some((self.first.get(path)?, self.second.get(path)?))
    }

    /// One bias-corrected Adam update of every trainable parameter.
    ///
    /// Frozen paths are skipped even when a gradient is supplied for them.
    pub fn step(
        &mut self,
        params: &mut ParameterSet,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        let trainable: Vec<String> = params.trainable_paths().map(str::to_string).collect();
        for path in &trainable {
            let g = grads
                .get(path)
                .ok_or_else(|| Error::Contract(format!("missing gradient for {path}")))?;
            if g.shape() != params.get(path).unwrap().shape() {
                return Err(Error::Shape(format!("gradient shape for {path}")));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for path in trainable {
            let g = grads[&path].data();
            let p = params.get_mut(&path).unwrap().data_mut();
            let m = self
                .first
                .entry(path.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .second
                .entry(path)
                .or_insert_with(|| vec![0.0; g.len()]);
            for k in 0..g.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
