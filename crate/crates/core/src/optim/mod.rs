//! Optimization: preference and policy-gradient objectives on the tape,
//! AdamW, and the warmup + cosine learning-rate schedule.

mod adamw;
mod grpo;
mod simpo;

pub use adamw::{AdamWConfig, OptimizerState};
pub use grpo::{
    grpo_advantages, grpo_loss, grpo_loss_on_tape, importance_ratios, GRPOConfig,
};
pub use simpo::{simpo_loss, simpo_loss_on_tape, SimPOConfig};

use crate::Real;

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at
/// `total_steps`. Steps beyond the horizon return the floor value 0.
pub fn cosine_lr(step: usize, warmup_steps: usize, total_steps: usize, base_lr: Real) -> Real {
    assert!(
        total_steps > warmup_steps,
        "schedule needs total_steps > warmup_steps"
    );
    if step < warmup_steps {
        return base_lr * step as Real / warmup_steps as Real;
    }
    if step >= total_steps {
        return 0.0;
    }
    let progress = (step - warmup_steps) as Real / (total_steps - warmup_steps) as Real;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
