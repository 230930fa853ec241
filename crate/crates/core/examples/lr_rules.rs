//! Step-count LR rescaling and the cosine schedule it feeds.

use silq::distill::{lr_schedule, scale_lr_for_steps, TrainConfig};

fn main() {
    let (base_lr, base_steps) = (5e-6, 8000);
    for steps in [750, 2000, 8000, 32000] {
        println!(
            "{steps:>6} steps: peak LR {:.4e}",
            scale_lr_for_steps(base_lr, base_steps, steps)
        );
    }

    let config = TrainConfig {
        base_lr,
        base_steps,
        steps: 100,
        auto_lr: true,
        ..Default::default()
    };
    println!("\nschedule for {} steps (peak {:.3e})", config.steps, config.peak_lr());
    for step in (0..=config.steps).step_by(10) {
        println!("{step:>4} {:.4e}", lr_schedule(step, &config));
    }
}
