use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::params::Params;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Trainable parameters with their gradient buffers and a step counter.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    pub params: Params<f32>,
    grads: IndexMap<String, Tensor<f32>>,
    step: u64,
}

impl ParameterStore {
    pub fn new(params: Params<f32>) -> Self {
        Self { params, grads: IndexMap::new(), step: 0 }
    }

    pub fn with_step(params: Params<f32>, step: u64) -> Self {
        Self { params, grads: IndexMap::new(), step }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<f32>> {
        self.grads.get(name)
    }

    /// Accumulates gradients; every entry must name a trainable parameter of
    /// matching shape.
    pub fn accumulate_grads(&mut self, grads: IndexMap<String, Tensor<f32>>) -> Result<()> {
        for (name, g) in grads {
            let p = self.params.get(&name)?;
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    what: format!("gradient of {name}"),
                    expected: format!("{:?}", p.shape()),
                    found: format!("{:?}", g.shape()),
                });
            }
            if !self.params.is_trainable(&name) {
                return Err(Error::Invalid(format!("gradient supplied for buffer {name}")));
            }
            match self.grads.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.grads.insert(name, g);
                }
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.grads.clear();
    }

    /// Overwrites buffers (e.g. batch-norm running statistics).
    pub fn apply_buffer_updates(&mut self, updates: Vec<(String, Tensor<f32>)>) -> Result<()> {
        for (name, v) in updates {
            let slot = self.params.get_mut(&name)?;
            if slot.shape() != v.shape() {
                return Err(Error::ShapeMismatch {
                    what: format!("buffer {name}"),
                    expected: format!("{:?}", slot.shape()),
                    found: format!("{:?}", v.shape()),
                });
            }
            *slot = v;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup length in steps; 0 disables warmup.
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup_steps: 0 }
    }
}

/// First/second moment accumulators, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
    t: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.eps > 0.0) {
            return Err(Error::Invalid(format!("adam eps must be positive, got {}", config.eps)));
        }
        if config.lr < 0.0 {
            return Err(Error::Invalid(format!("learning rate must be non-negative, got {}", config.lr)));
        }
        Ok(Self { config, m: IndexMap::new(), v: IndexMap::new(), t: 0 })
    }

    fn current_lr(&self) -> f64 {
        let w = self.config.warmup_steps;
        if w > 0 && self.t <= w {
            self.config.lr * self.t as f64 / w as f64
        } else {
            self.config.lr
        }
    }
}

/// One bias-corrected Adam update over every trainable parameter; clears the
/// gradient buffers and advances the step counter.
pub fn adam_step(store: &mut ParameterStore, opt: &mut OptimizerState) -> Result<()> {
    let names: Vec<String> = store.params.trainable_names().cloned().collect();
    if let Some(missing) = names.iter().find(|n| !store.grads.contains_key(*n)) {
        return Err(Error::MissingGradient(missing.clone()));
    }
    opt.t += 1;
    let lr = opt.current_lr();
    let AdamConfig { beta1, beta2, eps, .. } = opt.config;
    let bc1 = 1.0 - beta1.powi(opt.t.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - beta2.powi(opt.t.min(i32::MAX as u64) as i32);
    for name in &names {
        let g = &store.grads[name];
        let len = g.len();
        let m = opt.m.entry(name.clone()).or_insert_with(|| vec![0.0; len]);
        let v = opt.v.entry(name.clone()).or_insert_with(|| vec![0.0; len]);
        let w = store.params.get_mut(name)?;
        for (((wi, &gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi as f64;
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            if lr != 0.0 {
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *wi = (*wi as f64 - lr * mh / (vh.sqrt() + eps)) as f32;
            }
        }
    }
    store.grads.clear();
    store.step += 1;
    Ok(())
}
