use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// L2 penalty added to the gradient.
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias-corrected moment estimates.
pub struct Adam {
    cfg: AdamConfig,
    params: Vec<Var>,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    step: i32,
}

impl Adam {
    pub fn new(params: Vec<Var>, cfg: AdamConfig) -> Self {
        let n = params.len();
        Self {
            cfg,
            params,
            m: vec![None; n],
            v: vec![None; n],
            step: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update from `grads`; parameters without a gradient are
    /// left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = grads.get(p) else { continue };
            // leaf gradients can still hold the forward graph; keeping them in
            // the moment estimates would chain every step's graph together
            let g = g.detach();
            let g = if c.weight_decay > 0.0 {
                (g + (p.as_detached_tensor() * c.weight_decay)?)?
            } else {
                g
            };
            let m = match &self.m[i] {
                Some(m) => ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?,
                None => (&g * (1.0 - c.beta1))?,
            };
            let v = match &self.v[i] {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            p.set(&(p.as_tensor() - (update * c.lr)?)?)?;
            self.m[i] = Some(m);
            self.v[i] = Some(v);
        }
        Ok(())
    }
}
