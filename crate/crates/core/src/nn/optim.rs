use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar, Tensor};
use crate::{Error, Result};

/// Linear warmup followed by cosine decay to `min_lr` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    /// Learning rate applied on update number `step` (0-based).
    pub fn lr(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps.min(step)) as f64 / decay as f64).min(1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

/// Adam with decoupled weight decay and bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub schedule: CosineSchedule,
    /// Number of updates applied so far.
    pub step: usize,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, config: AdamWConfig, schedule: CosineSchedule) -> Self {
        let zeros = |_: ()| -> Vec<Tensor<T>> {
            params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect()
        };
        Self {
            config,
            schedule,
            step: 0,
            first_moment: zeros(()),
            second_moment: zeros(()),
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    /// Applies one update. Missing gradients count as zero. Returns the
    /// pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<f64> {
        if grads.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(Error::Invalid(format!(
                "optimizer expects {} gradient slots, got {}",
                params.len(),
                grads.len()
            )));
        }
        let mut sq = 0.0;
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != params.get(id).shape() {
                    return Err(Error::Shape {
                        op: "optimizer_step",
                        left: params.get(id).shape().to_vec(),
                        right: g.shape().to_vec(),
                    });
                }
                for &x in g.data() {
                    if !x.is_finite() {
                        return Err(Error::NonFinite(format!("gradient of {}", params.name(id))));
                    }
                    sq += x.to_f64() * x.to_f64();
                }
            }
        }
        let norm = sq.sqrt();
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let lr = self.current_lr();
        let t = (self.step + 1) as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let step_size = T::from_f64(lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(c.eps);
        let decay = T::from_f64(lr * c.weight_decay);
        let clip = T::from_f64(clip);
        for id in 0..params.len() {
            let m = self.first_moment[id].data_mut();
            let v = self.second_moment[id].data_mut();
            let w = params.get_mut(id).data_mut();
            let g = grads[id].as_ref().map(Tensor::data);
            for i in 0..w.len() {
                let gi = g.map_or(T::zero(), |g| g[i] * clip);
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                w[i] = w[i] - decay * w[i] - step_size * m[i] / denom;
            }
        }
        self.step += 1;
        Ok(norm)
    }
}
