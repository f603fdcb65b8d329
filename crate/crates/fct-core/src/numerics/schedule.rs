//! Learning-rate schedule: linear warmup into a single cosine decay cycle.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_epochs: usize, total_epochs: usize) -> Result<Self> {
        if total_epochs == 0 {
            return Err(Error::Config("schedule needs at least one epoch".into()));
        }
        if warmup_epochs >= total_epochs {
            return Err(Error::Config(format!(
                "warmup of {warmup_epochs} epochs does not fit into {total_epochs} total"
            )));
        }
        if !(base_lr.is_finite() && base_lr > 0.0) {
            return Err(Error::Config(format!("base learning rate {base_lr} invalid")));
        }
        Ok(LrSchedule { base_lr, warmup_epochs, total_epochs })
    }
}

/// Learning rate for a zero-based epoch index.
///
/// During warmup the rate ramps as `base * (epoch + 1) / warmup`, reaching
/// the base rate on the last warmup epoch; afterwards it follows half a
/// cosine period down to zero:
/// `0.5 * base * (1 + cos(pi * (epoch - warmup) / (total - warmup)))`.
pub fn lr_at_epoch(schedule: &LrSchedule, epoch: usize) -> Result<f64> {
    if epoch >= schedule.total_epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} outside schedule of {} epochs",
            schedule.total_epochs
        )));
    }
    let lr = if epoch < schedule.warmup_epochs {
        schedule.base_lr * (epoch + 1) as f64 / schedule.warmup_epochs as f64
    } else {
        let progress = (epoch - schedule.warmup_epochs) as f64
            / (schedule.total_epochs - schedule.warmup_epochs) as f64;
        0.5 * schedule.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    };
    Ok(lr)
}
