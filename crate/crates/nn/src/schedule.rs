//! Learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};

/// Linear warm-up, optional plateau, then cosine annealing to `min_lr` without restarts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub warmup: usize,
    pub total: usize,
    pub min_lr: f64,
    pub max_lr: f64,
    /// Epoch at which the decay starts (no effect when below `warmup`).
    pub hold_until: usize,
}

impl CosineSchedule {
    /// Refinement model: 10 warm-up epochs, 100 total, 1e-6 → 1e-4.
    pub fn refinement() -> Self {
        CosineSchedule {
            warmup: 10,
            total: 100,
            min_lr: 1e-6,
            max_lr: 1e-4,
            hold_until: 0,
        }
    }

    /// Prediction model: 3e-5 held for 40 epochs, then cosine to 1e-6 at epoch 100.
    pub fn prediction() -> Self {
        CosineSchedule {
            warmup: 0,
            total: 100,
            min_lr: 1e-6,
            max_lr: 3e-5,
            hold_until: 40,
        }
    }

    /// Same shape compressed to `total` epochs, breakpoints scaled proportionally.
    pub fn rescaled(&self, total: usize) -> Self {
        let f = |e: usize| ((e as f64) * total as f64 / self.total as f64).round() as usize;
        CosineSchedule {
            warmup: f(self.warmup).min(total.saturating_sub(1)),
            hold_until: f(self.hold_until).min(total.saturating_sub(1)),
            total,
            ..*self
        }
    }

    pub fn lr(&self, epoch: usize) -> Result<f64> {
        lr_cosine(epoch, self.warmup, self.total, self.min_lr, self.max_lr, self.hold_until)
    }
}

pub fn lr_cosine(epoch: usize, warmup: usize, total: usize, min_lr: f64, max_lr: f64, hold_until: usize) -> Result<f64> {
    let bad = |m: String| Err(NnError::input("lr_cosine", m));
    if epoch >= total {
        return bad(format!("epoch {epoch} outside 0..{total}"));
    }
    if !(min_lr >= 0.0 && max_lr >= min_lr && max_lr.is_finite()) {
        return bad(format!("need 0 <= min_lr <= max_lr, got {min_lr}, {max_lr}"));
    }
    if warmup > total || hold_until > total {
        return bad(format!("warmup {warmup} / hold {hold_until} exceed total {total}"));
    }
    if epoch < warmup {
        return Ok((epoch + 1) as f64 / warmup as f64 * max_lr);
    }
    if epoch < hold_until {
        return Ok(max_lr);
    }
    let start = warmup.max(hold_until);
    let span = (total - start).max(1) as f64;
    let phase = std::f64::consts::PI * (epoch - start) as f64 / span;
    Ok(min_lr + 0.5 * (max_lr - min_lr) * (1.0 + phase.cos()))
}
