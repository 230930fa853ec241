//! Knowledge-distillation QAT: loss, schedule, optimizer and training loop.

mod adamw;
mod schedule;
mod trainer;

pub use adamw::AdamW;
pub use schedule::{lr_schedule, scale_lr_for_steps};
pub use trainer::{eval_kd_loss, pretrain, train_qat, train_qat_with, Corpora, StepRecord, TrainMetrics};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SilqError};
use crate::io::corpus::PAD;
use crate::tensor::{Tape, Tensor, Value};

/// How `kd_ratio` splits the loss between teacher labels and hard targets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KdMixing {
    /// `r·T²·KD + (1-r)·CE` on every position.
    #[default]
    Convex,
    /// The first `round(r·B)` sequences of a batch use teacher labels, the
    /// rest use hard targets.
    PerSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub base_steps: usize,
    pub steps: usize,
    /// Rescale `base_lr` by `sqrt(base_steps / steps)`.
    pub auto_lr: bool,
    pub kd_ratio: f64,
    pub kd_temp: f64,
    pub kd_mixing: KdMixing,
    /// Fraction of sequences drawn from the pretrain-role corpus.
    pub mixture_ratio: f64,
    pub act_lr_multiplier: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Apply weight decay to quantizer step sizes as well.
    pub decay_step_sizes: bool,
    pub batch_size: usize,
    pub seq_len: usize,
    pub min_lr_fraction: f64,
    pub dropout: f64,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Batches assembled ahead on a worker thread; 0 disables the worker.
    pub prefetch: usize,
    /// Held-out perplexity every `eval_every` steps; 0 disables.
    pub eval_every: usize,
    pub lsq_grad_scale: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 5e-6,
            base_steps: 8000,
            steps: 8000,
            auto_lr: false,
            kd_ratio: 1.0,
            kd_temp: 1.0,
            kd_mixing: KdMixing::Convex,
            mixture_ratio: 0.25,
            act_lr_multiplier: 50.0,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-10,
            weight_decay: 0.1,
            decay_step_sizes: false,
            batch_size: 8,
            seq_len: 64,
            min_lr_fraction: 0.1,
            dropout: 0.0,
            grad_clip: None,
            prefetch: 0,
            eval_every: 0,
            lsq_grad_scale: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_lr", self.base_lr),
            ("kd_temp", self.kd_temp),
            ("act_lr_multiplier", self.act_lr_multiplier),
            ("adam_eps", self.adam_eps),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(SilqError::Config(format!("{name} must be positive, got {v}")));
        }
        if self.base_steps == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return Err(SilqError::Config(
                "base_steps, batch_size and seq_len must be positive".into(),
            ));
        }
        for (name, v) in [
            ("kd_ratio", self.kd_ratio),
            ("mixture_ratio", self.mixture_ratio),
            ("min_lr_fraction", self.min_lr_fraction),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SilqError::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(SilqError::Config("weight_decay must be non-negative".into()));
        }
        if self.dropout != 0.0 {
            return Err(SilqError::Config(
                "dropout must stay disabled (0) for distillation".into(),
            ));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(SilqError::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    /// Peak learning rate after the optional step-count rescaling.
    pub fn peak_lr(&self) -> f64 {
        if self.auto_lr && self.steps > 0 {
            scale_lr_for_steps(self.base_lr, self.base_steps, self.steps)
        } else {
            self.base_lr
        }
    }
}

fn one_hot_rows(targets: &[usize], vocab: usize) -> Tensor {
    let mut t = Tensor::zeros(&[targets.len(), vocab]);
    for (r, &tok) in targets.iter().enumerate() {
        if tok != PAD {
            t.row_mut(r)[tok] = 1.0;
        }
    }
    t
}

/// Distillation loss over `[rows, vocab]` logits with one hard target per row.
///
/// `loss = r·T²·CE(softmax(teacher/T), student/T) + (1-r)·CE(onehot, student)`;
/// rows whose target is `PAD` are excluded. The teacher is a constant.
pub fn kd_loss(
    tape: &mut Tape,
    student_logits: Value,
    teacher_logits: &Tensor,
    targets: &[usize],
    kd_ratio: f64,
    kd_temp: f64,
) -> Result<Value> {
    let mask: Vec<f32> = targets.iter().map(|&t| if t == PAD { 0.0 } else { 1.0 }).collect();
    kd_loss_masked(
        tape,
        student_logits,
        teacher_logits,
        targets,
        (&mask, kd_ratio),
        (&mask, 1.0 - kd_ratio),
        kd_temp,
    )
}

/// [`kd_loss`] with a separate `(row mask, coefficient)` for the soft and hard
/// terms. Both terms are normalized by the number of rows active in either.
pub(crate) fn kd_loss_masked(
    tape: &mut Tape,
    student_logits: Value,
    teacher_logits: &Tensor,
    targets: &[usize],
    (soft_mask, soft_coef): (&[f32], f64),
    (hard_mask, hard_coef): (&[f32], f64),
    kd_temp: f64,
) -> Result<Value> {
    let shape = tape.value(student_logits).shape().to_vec();
    if teacher_logits.shape() != shape.as_slice() || targets.len() != shape[0] {
        return Err(SilqError::dim(
            "kd_loss",
            format!(
                "student {shape:?}, teacher {:?}, {} targets",
                teacher_logits.shape(),
                targets.len()
            ),
        ));
    }
    if !(kd_temp > 0.0) {
        return Err(SilqError::Input("distillation temperature must be positive".into()));
    }
    let active: Vec<f32> = soft_mask.iter().zip(hard_mask).map(|(a, b)| a.max(*b)).collect();
    let total: f64 = active.iter().map(|&w| f64::from(w)).sum();
    if total == 0.0 {
        return Err(SilqError::Input("no unpadded positions in batch".into()));
    }
    let soft_rows: f64 = soft_mask.iter().map(|&w| f64::from(w)).sum();
    let hard_rows: f64 = hard_mask.iter().map(|&w| f64::from(w)).sum();
    let mut terms = Vec::with_capacity(2);

    if soft_coef > 0.0 && soft_rows > 0.0 {
        let probs = crate::tensor::softmax_rows_f64(teacher_logits, kd_temp as f32);
        let scaled = if kd_temp == 1.0 {
            student_logits
        } else {
            tape.scale(student_logits, (1.0 / kd_temp) as f32)
        };
        let ce = tape.cross_entropy_weighted(scaled, &probs, soft_mask)?;
        let w = soft_coef * kd_temp * kd_temp * soft_rows / total;
        terms.push(if w == 1.0 { ce } else { tape.scale(ce, w as f32) });
    }
    if hard_coef > 0.0 && hard_rows > 0.0 {
        let onehot = one_hot_rows(targets, shape[1]);
        let ce = tape.cross_entropy_weighted(student_logits, &onehot, hard_mask)?;
        let w = hard_coef * hard_rows / total;
        terms.push(if w == 1.0 { ce } else { tape.scale(ce, w as f32) });
    }
    match terms.as_slice() {
        [] => Err(SilqError::Input("loss has no active term".into())),
        [one] => Ok(*one),
        [a, b] => tape.add(*a, *b),
        _ => unreachable!(),
    }
}
