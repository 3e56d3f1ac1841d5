use std::f64::consts::PI;

use super::train::TrainConfig;

/// Linear warm-up to `peak_lr` over the first `warmup_fraction` of steps,
/// then cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let peak = config.peak_lr;
    let total = config.total_steps as f64;
    let warmup = config.warmup_steps() as f64;
    let step = (step as f64).min(total);
    if step < warmup {
        peak * step / warmup
    } else if total <= warmup {
        peak
    } else {
        peak * 0.5 * (1.0 + (PI * (step - warmup) / (total - warmup)).cos())
    }
}
