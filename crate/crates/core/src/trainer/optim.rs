//! SGD with (Nesterov) momentum and global-norm gradient clipping.

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::nn::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// Exponent of the polynomial learning-rate decay.
    pub poly_exponent: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.99,
            nesterov: true,
            weight_decay: 0.0,
            poly_exponent: 0.9,
            grad_clip: Some(12.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return config_err(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return config_err(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 || self.poly_exponent < 0.0 {
            return config_err("weight_decay and poly_exponent must be non-negative");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return config_err("grad_clip must be positive");
            }
        }
        Ok(())
    }
}

/// Velocity-form momentum SGD: `v = mu v + g`, then `p -= lr (g + mu v)`
/// (Nesterov) or `p -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: OptimizerConfig,
    velocity: Vec<ArrayD<f32>>,
}

impl Sgd {
    pub fn new(config: OptimizerConfig, params: &ParamStore<f32>) -> Self {
        let velocity = params.iter().map(|(_, p)| ArrayD::zeros(p.value.raw_dim())).collect();
        Self { config, velocity }
    }

    /// Restore with saved velocity buffers.
    pub fn with_velocity(config: OptimizerConfig, params: &ParamStore<f32>, velocity: Vec<ArrayD<f32>>) -> Result<Self> {
        if velocity.len() != params.len()
            || velocity.iter().zip(params.iter()).any(|(v, (_, p))| v.shape() != p.value.shape())
        {
            return shape_err("momentum buffers do not match the parameters");
        }
        Ok(Self { config, velocity })
    }

    pub fn velocity(&self) -> &[ArrayD<f32>] {
        &self.velocity
    }

    /// Scale `grads` in place so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip(grads: &mut [ArrayD<f32>], max_norm: f64) -> f64 {
        let norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if norm > max_norm {
            let s = (max_norm / (norm + 1e-6)) as f32;
            grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * s));
        }
        norm
    }

    /// One update at learning rate `lr`. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamStore<f32>, mut grads: Vec<ArrayD<f32>>, lr: f64) -> Result<f64> {
        if grads.len() != self.velocity.len() {
            return shape_err("gradient count does not match the parameters");
        }
        let norm = match self.config.grad_clip {
            Some(c) => Self::clip(&mut grads, c),
            None => Self::clip(&mut grads, f64::INFINITY),
        };
        let mu = self.config.momentum as f32;
        let wd = self.config.weight_decay as f32;
        let lr = lr as f32;
        let nesterov = self.config.nesterov;
        for (((_, p), g), v) in params.iter_mut().zip(grads.iter_mut()).zip(self.velocity.iter_mut()) {
            if wd != 0.0 {
                Zip::from(&mut *g).and(&p.value).for_each(|gi, &pi| *gi += wd * pi);
            }
            Zip::from(&mut *v).and(&*g).for_each(|vi, &gi| *vi = mu * *vi + gi);
            if nesterov {
                Zip::from(&mut p.value)
                    .and(&*g)
                    .and(&*v)
                    .for_each(|pi, &gi, &vi| *pi -= lr * (gi + mu * vi));
            } else {
                Zip::from(&mut p.value).and(&*v).for_each(|pi, &vi| *pi -= lr * vi);
            }
        }
        Ok(norm)
    }
}
