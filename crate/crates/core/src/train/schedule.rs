use crate::error::{bail, Result};

pub const WARMUP_FRACTION: f64 = 0.02;

/// Linear warmup from 0, then half-cosine decay to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_init: f64, warmup_steps: usize) -> Result<f64> {
    if step > total_steps {
        bail!(Validation, "step {} is past the schedule end {}", step, total_steps);
    }
    if warmup_steps > total_steps {
        bail!(Validation, "warmup {} exceeds the {} scheduled steps", warmup_steps, total_steps);
    }
    if step < warmup_steps {
        return Ok(lr_init * step as f64 / warmup_steps as f64);
    }
    let span = total_steps - warmup_steps;
    if span == 0 {
        return Ok(lr_init);
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    Ok(lr_init * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress)))
}

/// Warmup length used by training runs: 2% of the schedule, rounded down.
pub fn warmup_steps(total_steps: usize) -> usize {
    (WARMUP_FRACTION * total_steps as f64) as usize
}
