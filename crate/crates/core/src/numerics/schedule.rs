//! Learning-rate schedule: linear warm-up followed by decay to zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    #[default]
    Linear,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_min: f64,
    pub lr_max: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    #[serde(default)]
    pub decay: Decay,
}

impl LrSchedule {
    pub fn new(lr_min: f64, lr_max: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        let s = Self {
            lr_min,
            lr_max,
            warmup_steps,
            total_steps,
            decay: Decay::Linear,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_decay(mut self, decay: Decay) -> Self {
        self.decay = decay;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.warmup_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::InvalidArgument(format!(
                "need 0 < warmup_steps < total_steps, got {} and {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    /// Learning rate at `step`, for `0 <= step <= total_steps`.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        if step <= self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return Ok(self.lr_min + (self.lr_max - self.lr_min) * frac);
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        Ok(match self.decay {
            Decay::Linear => self.lr_max * (1.0 - progress),
            Decay::Cosine => self.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
        })
    }
}
