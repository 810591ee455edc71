use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    /// `initial` before iteration `drop_at`, `initial * factor` from then on.
    StepDrop { initial: f64, drop_at: usize, factor: f64 },
    /// `initial * rate^epoch`.
    ExpEpoch { initial: f64, rate: f64 },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let (initial, decay, what) = match *self {
            LrSchedule::StepDrop { initial, factor, .. } => (initial, factor, "factor"),
            LrSchedule::ExpEpoch { initial, rate } => (initial, rate, "rate"),
        };
        if !(initial > 0.0 && initial.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "initial learning rate must be positive, got {initial}"
            )));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::InvalidArgument(format!("{what} must be in (0, 1), got {decay}")));
        }
        Ok(())
    }

    /// Learning rate at `index`: an iteration for step drops, an epoch for
    /// exponential decay.
    pub fn lr_at(&self, index: usize) -> f64 {
        match *self {
            LrSchedule::StepDrop {
                initial,
                drop_at,
                factor,
            } => {
                if index < drop_at {
                    initial
                } else {
                    initial * factor
                }
            }
            LrSchedule::ExpEpoch { initial, rate } => initial * rate.powi(index as i32),
        }
    }

    /// Picks the index the schedule is defined over.
    pub fn lr_for(&self, iteration: usize, epoch: usize) -> f64 {
        match self {
            LrSchedule::StepDrop { .. } => self.lr_at(iteration),
            LrSchedule::ExpEpoch { .. } => self.lr_at(epoch),
        }
    }
}
