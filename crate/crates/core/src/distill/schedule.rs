use std::f64::consts::PI;

use super::TrainConfig;

/// Cosine decay from the peak LR to `min_lr_fraction · peak` over
/// `config.steps`, no warm-up.
pub fn lr_schedule(step: usize, config: &TrainConfig) -> f64 {
    let peak = config.peak_lr();
    if config.steps == 0 {
        return peak;
    }
    let min = config.min_lr_fraction * peak;
    let progress = step.min(config.steps) as f64 / config.steps as f64;
    min + 0.5 * (peak - min) * (1.0 + (PI * progress).cos())
}

/// Inverse square-root LR rescaling for a change in training length.
pub fn scale_lr_for_steps(base_lr: f64, base_steps: usize, new_steps: usize) -> f64 {
    base_lr * (base_steps as f64 / new_steps as f64).sqrt()
}
