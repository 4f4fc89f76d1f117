use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// `θ ← θ − lr·wd·θ`, then the Adam update with moments from the
    /// stored gradients. Every parameter must have a gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| p.tensor.grad().is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        if self.m.len() != store.len() {
            return Err(Error::DimMismatch(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let t = &mut store.get_mut(id).tensor;
            let grad: Vec<f64> = t.grad().expect("checked above").iter().map(|&g| f64::from(g)).collect();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, theta) in t.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                let decayed = f64::from(*theta) * (1.0 - lr * weight_decay);
                *theta = (decayed - lr * update) as f32;
            }
        }
        Ok(())
    }
}

/// Linear warmup from `warmup_lr` to `base_lr`, then cosine decay to 0 at
/// `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(Error::RangeError {
                key: "warmup_steps".into(),
                detail: format!("{warmup_steps} exceeds total steps {total_steps}"),
            });
        }
        Ok(Self {
            base_lr,
            warmup_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            return Ok(self.warmup_lr + (self.base_lr - self.warmup_lr) * t);
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return Ok(self.base_lr);
        }
        let t = (step - self.warmup_steps) as f64 / span as f64;
        Ok(0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}
