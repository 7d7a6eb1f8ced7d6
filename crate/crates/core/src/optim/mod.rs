//! AdamW with decoupled weight decay, linear-warmup cosine schedule,
//! global-norm clipping, early stopping and the training loop.

mod train;

pub use train::{
    train_loop, EpochRecord, RngState, StepOutcome, TrainConfig, TrainOutcome, TrainReport, TrainState, Trainer,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid AdamW settings {self:?}")))
        }
    }
}

/// Moment buffers and step count, one buffer pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(params: &ParamStore, config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        let zeros = || params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Ok(AdamWState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    /// One bias-corrected AdamW update with the gradients stored on the
    /// parameters. Parameters without a gradient are left alone. Nothing is
    /// modified when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} moment buffers for {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        for p in params.iter() {
            if let Some(g) = p.tensor.grad() {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("gradient of {} is {} at index {i}", p.name, g[i])));
                }
            }
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(grad) = p.tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let wd = if p.decay { weight_decay } else { 0.0 };
            let theta = p.tensor.data_mut();
            for i in 0..theta.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let old = theta[i];
                theta[i] = old - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * wd * old;
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to `min_lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(base_lr: f64, min_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if !(warmup_steps > 0 && warmup_steps < total_steps) {
            return Err(Error::Parameter(format!(
                "schedule needs 0 < warmup ({warmup_steps}) < total ({total_steps})"
            )));
        }
        if !(base_lr > 0.0 && base_lr.is_finite() && (0.0..=base_lr).contains(&min_lr)) {
            return Err(Error::Parameter(format!("schedule needs 0 <= min_lr ({min_lr}) <= base_lr ({base_lr})")));
        }
        Ok(Schedule {
            base_lr,
            min_lr,
            warmup_steps,
            total_steps,
        })
    }

    /// Learning rate at `step`; steps past the end stay at `min_lr`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return self.min_lr;
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.min_lr + (self.base_lr - self.min_lr) * cosine
    }
}

/// Scales every buffer so their joint L2 norm is at most `threshold` and
/// returns the factor applied (1.0 when under the threshold).
pub fn clip_global_norm(grads: &mut [&mut [f64]], threshold: f64) -> Result<f64> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::Parameter(format!("clip threshold {threshold} must be positive")));
    }
    let mut sq = 0.0;
    for g in grads.iter() {
        for &v in g.iter() {
            if v.is_nan() {
                return Err(Error::Numeric("NaN gradient before clipping".into()));
            }
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    if norm <= threshold {
        return Ok(1.0);
    }
    let scale = threshold / norm;
    for g in grads.iter_mut() {
        g.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(scale)
}

/// [`clip_global_norm`] over the gradients held by a parameter store.
pub fn clip_param_grads(params: &mut ParamStore, threshold: f64) -> Result<f64> {
    let mut grads: Vec<&mut [f64]> = params.iter_mut().filter_map(|p| p.tensor.grad_mut()).collect();
    clip_global_norm(&mut grads, threshold)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Patience-based early stopping on a metric where larger is better.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best_metric: Option<f64>,
    /// 1-based epoch of the best metric.
    pub best_epoch: Option<usize>,
    pub epochs_since_improvement: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Result<Self> {
        if patience == 0 {
            return Err(Error::Parameter("patience must be at least 1".into()));
        }
        Ok(EarlyStopper {
            patience,
            best_metric: None,
            best_epoch: None,
            epochs_since_improvement: 0,
        })
    }

    /// Records the metric of `epoch`. Only a strictly larger value counts
    /// as improvement; an undefined metric never does.
    pub fn update(&mut self, epoch: usize, metric: Option<f64>) -> StopDecision {
        let improved = match (metric, self.best_metric) {
            (Some(m), Some(best)) => m > best,
            (Some(m), None) => !m.is_nan(),
            (None, _) => false,
        };
        if improved {
            self.best_metric = metric;
            self.best_epoch = Some(epoch);
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        StopDecision {
            improved,
            stop: self.epochs_since_improvement >= self.patience,
        }
    }
}
