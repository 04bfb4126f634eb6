//! Linear warmup then linear decay to zero.

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak: f64,
}

/// Builds the schedule for `total_steps` with `W = ceil(warmup_frac·T)`,
/// kept within `1..T`.
pub fn make_schedule(total_steps: usize, peak: f64, warmup_frac: f64) -> Result<Schedule, TrainError> {
    if total_steps < 2 {
        return Err(TrainError::Plan(format!("total steps must be at least 2, got {total_steps}")));
    }
    if !(warmup_frac > 0.0 && warmup_frac < 1.0) {
        return Err(TrainError::Plan(format!("warmup fraction must lie in (0, 1), got {warmup_frac}")));
    }
    if !(peak.is_finite() && peak > 0.0) {
        return Err(TrainError::Plan(format!("peak learning rate must be positive, got {peak}")));
    }
    // 0.1·100 is 10.000000000000002 in binary; do not round that up to 11.
    let raw = warmup_frac * total_steps as f64;
    let w = (raw - 1e-9 * raw.max(1.0)).ceil() as usize;
    Ok(Schedule {
        total_steps,
        warmup_steps: w.clamp(1, total_steps - 1),
        peak,
    })
}

impl Schedule {
    /// Learning rate at step `s` (steps past the end give 0).
    pub fn lr(&self, s: usize) -> f64 {
        let (t, w) = (self.total_steps, self.warmup_steps);
        if s <= w {
            self.peak * (s as f64 / w as f64)
        } else if s >= t {
            0.0
        } else {
            self.peak * ((t - s) as f64 / (t - w) as f64)
        }
    }
}
