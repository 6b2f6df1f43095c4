//! AdamW, EMA parameter averaging and learning-rate schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::tape::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Bias-corrected AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Updates every parameter that has an entry in `grads`; others are untouched.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::Parameter(format!("learning rate must be >= 0, got {lr}")));
        }
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Training {
                    param: name.clone(),
                    reason: "non-finite gradient".into(),
                });
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
            });
            let pd = p.data_mut();
            let md = mom.m.data_mut();
            let vd = mom.v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let denom = (vd[i] / bc2).sqrt() + eps;
                pd[i] *= 1.0 - lr * weight_decay;
                pd[i] -= lr * mhat / denom;
            }
        }
        Ok(())
    }
}

/// `teacher ← momentum·teacher + (1−momentum)·student`, elementwise.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Parameter(format!("EMA momentum {momentum} outside [0, 1]")));
    }
    if teacher.len() != student.len() {
        return Err(Error::Shape(format!(
            "teacher has {} tensors, student {}",
            teacher.len(),
            student.len()
        )));
    }
    for (name, t) in teacher.iter_mut() {
        let s = student.get(name)?;
        if s.shape() != t.shape() {
            return Err(Error::Shape(format!("EMA shape mismatch for `{name}`")));
        }
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = momentum * *tv + (1.0 - momentum) * sv;
        }
    }
    Ok(())
}

/// A learning-rate schedule over a scalar progress coordinate
/// (samples seen, steps, or fractional epochs).
pub trait LrSchedule: Send + Sync {
    fn name(&self) -> &'static str;
    fn lr_at(&self, progress: f64) -> Result<f64>;
    fn total(&self) -> f64;
}

/// Warmup-Stable-Decay: linear warmup, flat peak, linear decay to zero over
/// the final `decay_fraction` of the budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WsdSchedule {
    pub peak_lr: f64,
    pub warmup: f64,
    pub total: f64,
    #[serde(default = "default_decay_fraction")]
    pub decay_fraction: f64,
}

fn default_decay_fraction() -> f64 {
    0.1
}

impl WsdSchedule {
    pub fn new(peak_lr: f64, warmup: f64, total: f64, decay_fraction: f64) -> Result<Self> {
        let s = Self {
            peak_lr,
            warmup,
            total,
            decay_fraction,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) {
            return Err(Error::Parameter("WSD peak learning rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.decay_fraction) {
            return Err(Error::Parameter("WSD decay fraction must be in [0, 1)".into()));
        }
        if !(self.warmup >= 0.0 && self.warmup < (1.0 - self.decay_fraction) * self.total) {
            return Err(Error::Parameter(format!(
                "WSD warmup {} must be below the decay start {}",
                self.warmup,
                (1.0 - self.decay_fraction) * self.total
            )));
        }
        Ok(())
    }

    pub fn decay_start(&self) -> f64 {
        (1.0 - self.decay_fraction) * self.total
    }
}

impl LrSchedule for WsdSchedule {
    fn name(&self) -> &'static str {
        "wsd"
    }

    fn lr_at(&self, s: f64) -> Result<f64> {
        if !(0.0..=self.total).contains(&s) {
            return Err(Error::Parameter(format!(
                "schedule position {s} outside [0, {}]",
                self.total
            )));
        }
        let start = self.decay_start();
        Ok(if s < self.warmup {
            self.peak_lr * s / self.warmup
        } else if s <= start {
            self.peak_lr
        } else {
            let window = self.total - start;
            self.peak_lr * ((self.total - s) / window).max(0.0)
        })
    }

    fn total(&self) -> f64 {
        self.total
    }
}

/// Wrapper matching the free-function form used in configs and logs.
pub fn wsd_lr(samples_seen: f64, cfg: &WsdSchedule) -> Result<f64> {
    cfg.lr_at(samples_seen)
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupCosine {
    pub peak_lr: f64,
    pub warmup: f64,
    pub decay: f64,
}

impl LrSchedule for WarmupCosine {
    fn name(&self) -> &'static str {
        "warmup-cosine"
    }

    fn lr_at(&self, e: f64) -> Result<f64> {
        let total = self.warmup + self.decay;
        if !(0.0..=total).contains(&e) {
            return Err(Error::Parameter(format!(
                "schedule position {e} outside [0, {total}]"
            )));
        }
        Ok(if e < self.warmup {
            self.peak_lr * e / self.warmup
        } else if self.decay <= 0.0 {
            self.peak_lr
        } else {
            let p = (e - self.warmup) / self.decay;
            (self.peak_lr * 0.5 * (1.0 + (PI * p).cos())).max(0.0)
        })
    }

    fn total(&self) -> f64 {
        self.warmup + self.decay
    }
}

/// Cosine ramp from `start` to `end` over `[0, 1]` progress.
pub fn cosine_ramp(start: f64, end: f64, progress: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    end - (end - start) * 0.5 * (1.0 + (PI * p).cos())
}
