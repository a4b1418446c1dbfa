use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Epoch-denominated schedule constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_epochs: f64,
    pub wd_start: f64,
    pub wd_end: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub teacher_temp_start: f64,
    pub teacher_temp_end: f64,
    pub teacher_temp_warmup_epochs: f64,
    pub freeze_prototypes_epochs: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            final_lr: 1e-7,
            warmup_epochs: 0.7,
            wd_start: 0.04,
            wd_end: 0.4,
            ema_start: 0.992,
            ema_end: 1.0,
            teacher_temp_start: 0.04,
            teacher_temp_end: 0.07,
            teacher_temp_warmup_epochs: 2.5,
            freeze_prototypes_epochs: 0.07,
        }
    }
}

/// Schedules bound to a concrete run length.
///
/// Epoch knobs become (possibly fractional) step counts through
/// `steps_per_epoch`; every schedule is a total function of the step.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedules {
    pub cfg: ScheduleConfig,
    pub steps_per_epoch: usize,
    pub total_steps: usize,
}

/// Half-cosine from `start` at `t = 0` to `end` at `t = 1`.
fn cosine(start: f64, end: f64, t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    end + 0.5 * (start - end) * (1.0 + (PI * t).cos())
}

impl Schedules {
    pub fn new(cfg: ScheduleConfig, steps_per_epoch: usize, total_steps: usize) -> Result<Self> {
        if steps_per_epoch == 0 || total_steps == 0 {
            return Err(config_err!(
                "schedules need positive steps_per_epoch and total_steps"
            ));
        }
        let epochs = [
            cfg.warmup_epochs,
            cfg.teacher_temp_warmup_epochs,
            cfg.freeze_prototypes_epochs,
        ];
        if epochs.iter().any(|&e| !(e >= 0.0 && e.is_finite())) {
            return Err(config_err!(
                "schedule epoch counts must be finite and non-negative"
            ));
        }
        if !(cfg.base_lr >= 0.0 && cfg.final_lr >= 0.0) {
            return Err(config_err!("learning rates must be non-negative"));
        }
        Ok(Self {
            cfg,
            steps_per_epoch,
            total_steps,
        })
    }

    /// `ceil(n_samples / batch)` steps make one epoch.
    pub fn steps_per_epoch(n_samples: usize, batch: usize) -> usize {
        n_samples.div_ceil(batch.max(1)).max(1)
    }

    fn epochs_to_steps(&self, epochs: f64) -> f64 {
        epochs * self.steps_per_epoch as f64
    }

    pub fn warmup_steps(&self) -> f64 {
        self.epochs_to_steps(self.cfg.warmup_epochs)
            .min(self.total_steps as f64)
    }

    /// Linear warmup from 0, then cosine decay to `final_lr` at `total_steps`.
    pub fn lr(&self, step: usize) -> f64 {
        let s = step as f64;
        let warm = self.warmup_steps();
        if s < warm {
            return self.cfg.base_lr * s / warm;
        }
        let span = self.total_steps as f64 - warm;
        if span <= 0.0 {
            return self.cfg.final_lr;
        }
        cosine(self.cfg.base_lr, self.cfg.final_lr, (s - warm) / span)
    }

    pub fn weight_decay(&self, step: usize) -> f64 {
        cosine(
            self.cfg.wd_start,
            self.cfg.wd_end,
            step as f64 / self.total_steps as f64,
        )
    }

    pub fn ema_momentum(&self, step: usize) -> f64 {
        cosine(
            self.cfg.ema_start,
            self.cfg.ema_end,
            step as f64 / self.total_steps as f64,
        )
    }

    pub fn teacher_temp(&self, step: usize) -> f64 {
        let span = self.epochs_to_steps(self.cfg.teacher_temp_warmup_epochs);
        let s = step as f64;
        if s >= span {
            return self.cfg.teacher_temp_end;
        }
        let t = s / span;
        self.cfg.teacher_temp_start + (self.cfg.teacher_temp_end - self.cfg.teacher_temp_start) * t
    }

    /// True while `step` lies inside the first `freeze_prototypes_epochs`.
    pub fn prototypes_frozen(&self, step: usize) -> bool {
        // The slack absorbs rounding in products such as 0.07 * 100.
        (step as f64) + 1e-9 < self.epochs_to_steps(self.cfg.freeze_prototypes_epochs)
    }

    /// Learning rate of the prototype layers: the main rate, or 0 while frozen.
    pub fn prototype_lr(&self, step: usize) -> f64 {
        if self.prototypes_frozen(step) {
            0.0
        } else {
            self.lr(step)
        }
    }
}
