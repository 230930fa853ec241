use std::sync::mpsc::sync_channel;
use std::thread;
use std::time::Instant;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SilqError};
use crate::io::corpus::{Batch, BatchSampler, Corpus, PAD};
use crate::model::{eval_perplexity, Model};
use crate::params::ParamKind;
use crate::tensor::{Tape, Tensor};

use super::{kd_loss_masked, lr_schedule, AdamW, KdMixing, TrainConfig};

/// Training data: the two sampling roles and an optional held-out set.
#[derive(Debug, Clone)]
pub struct Corpora {
    pub pretrain: Corpus,
    pub sft: Corpus,
    pub heldout: Option<Corpus>,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub records: Vec<StepRecord>,
    /// `(step, held-out perplexity)` pairs.
    pub evals: Vec<(usize, f64)>,
    pub wall_clock_secs: f64,
}

impl TrainMetrics {
    /// Mean loss of the last `n` records.
    pub fn tail_loss(&self, n: usize) -> f64 {
        let tail = &self.records[self.records.len().saturating_sub(n)..];
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// QAT with the teacher as a frozen constant.
pub fn train_qat(
    student: &mut Model,
    teacher: &Model,
    corpora: &Corpora,
    config: &TrainConfig,
) -> Result<TrainMetrics> {
    train_qat_with(student, Some(teacher), corpora, config, |_| Ok(()))
}

/// Next-token training of a model without a teacher (`kd_ratio` forced to 0).
pub fn pretrain(model: &mut Model, corpora: &Corpora, config: &TrainConfig) -> Result<TrainMetrics> {
    let config = TrainConfig {
        kd_ratio: 0.0,
        ..config.clone()
    };
    train_qat_with(model, None, corpora, &config, |_| Ok(()))
}

/// Training loop calling `on_record` after every step. Without a teacher,
/// `kd_ratio` must be 0.
pub fn train_qat_with(
    student: &mut Model,
    teacher: Option<&Model>,
    corpora: &Corpora,
    config: &TrainConfig,
    mut on_record: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainMetrics> {
    config.validate()?;
    if teacher.is_none() && config.kd_ratio != 0.0 {
        return Err(SilqError::Config("distillation needs a teacher model".into()));
    }
    if let Some(t) = teacher {
        if t.config.vocab_size != student.config.vocab_size {
            return Err(SilqError::Config("teacher and student vocabularies differ".into()));
        }
    }
    if config.seq_len > student.config.max_seq_len {
        return Err(SilqError::Config(format!(
            "seq_len {} exceeds the model's max_seq_len {}",
            config.seq_len, student.config.max_seq_len
        )));
    }
    student.lsq_grad_scale = config.lsq_grad_scale;
    for p in student.params.iter_mut().filter(|p| p.kind == ParamKind::ActStep) {
        p.lr_multiplier = config.act_lr_multiplier as f32;
    }
    let mut optimizer = AdamW::new(config.beta1, config.beta2, config.adam_eps, config.weight_decay);
    optimizer.decay_step_sizes = config.decay_step_sizes;

    let sampler = BatchSampler::new(
        corpora.pretrain.clone(),
        corpora.sft.clone(),
        config.mixture_ratio,
        config.batch_size,
        config.seq_len,
        config.seed,
    )?;
    info!(
        "training {} steps, peak lr {:.3e}, {} parameters",
        config.steps,
        config.peak_lr(),
        student.params.element_count()
    );

    let start = Instant::now();
    let mut metrics = TrainMetrics::default();
    let mut state = LoopState {
        student,
        teacher,
        corpora,
        config,
        optimizer: &mut optimizer,
        metrics: &mut metrics,
    };
    if config.prefetch == 0 {
        let mut sampler = sampler;
        for step in 0..config.steps {
            let batch = sampler.next_batch();
            let record = state.step(step, &batch)?;
            on_record(&record)?;
        }
    } else {
        thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel::<Batch>(config.prefetch);
            let steps = config.steps;
            let mut sampler = sampler;
            scope.spawn(move || {
                for _ in 0..steps {
                    if tx.send(sampler.next_batch()).is_err() {
                        break;
                    }
                }
            });
            for step in 0..config.steps {
                let batch = rx
                    .recv()
                    .map_err(|_| SilqError::Input("batch worker stopped early".into()))?;
                let record = state.step(step, &batch)?;
                on_record(&record)?;
            }
            Ok(())
        })?;
    }
    if let (Some(heldout), true) = (&corpora.heldout, config.eval_every > 0) {
        if metrics.evals.last().map(|e| e.0) != Some(config.steps) {
            let ppl = eval_perplexity(student, heldout, config.seq_len)?.perplexity;
            metrics.evals.push((config.steps, ppl));
        }
    }
    metrics.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(metrics)
}

struct LoopState<'a> {
    student: &'a mut Model,
    teacher: Option<&'a Model>,
    corpora: &'a Corpora,
    config: &'a TrainConfig,
    optimizer: &'a mut AdamW,
    metrics: &'a mut TrainMetrics,
}

impl LoopState<'_> {
    fn step(&mut self, step: usize, batch: &Batch) -> Result<StepRecord> {
        let config = self.config;
        let lr = lr_schedule(step, config);
        let teacher_logits = match self.teacher {
            Some(t) if config.kd_ratio > 0.0 => t.logits(&batch.inputs)?,
            _ => Tensor::zeros(&[batch.len() * config.seq_len, self.student.config.vocab_size]),
        };
        let targets: Vec<usize> = batch.targets.concat();
        let (soft, hard) = loss_masks(&targets, batch.len(), config);

        let mut tape = Tape::new();
        let out = self.student.forward(&mut tape, &batch.inputs, true)?;
        let loss = kd_loss_masked(
            &mut tape,
            out.logits,
            &teacher_logits,
            &targets,
            (&soft.0, soft.1),
            (&hard.0, hard.1),
            config.kd_temp,
        )?;
        let loss_value = f64::from(tape.value(loss).data()[0]);
        tape.backward(loss)?;

        let mut grads: Vec<Option<Tensor>> = out.params.iter().map(|&v| tape.grad(v).cloned()).collect();
        let grad_norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|&g| f64::from(g) * f64::from(g))
            .sum::<f64>()
            .sqrt();
        if !loss_value.is_finite() || !grad_norm.is_finite() {
            return Err(SilqError::Divergence {
                step,
                loss: loss_value as f32,
                snapshot: self.snapshot(lr, grad_norm),
            });
        }
        if let Some(clip) = config.grad_clip {
            if grad_norm > clip {
                let factor = (clip / grad_norm) as f32;
                for g in grads.iter_mut().flatten() {
                    g.data_mut().iter_mut().for_each(|v| *v *= factor);
                }
            }
        }
        self.optimizer.step(&mut self.student.params, &grads, lr)?;
        if !self.student.params.iter().all(|p| p.tensor.all_finite()) {
            return Err(SilqError::Divergence {
                step,
                loss: loss_value as f32,
                snapshot: self.snapshot(lr, grad_norm),
            });
        }

        let record = StepRecord {
            step,
            loss: loss_value,
            lr,
            grad_norm,
        };
        debug!("step {step} loss {loss_value:.5} lr {lr:.3e} grad_norm {grad_norm:.4}");
        self.metrics.records.push(record);

        if config.eval_every > 0 && (step + 1) % config.eval_every == 0 {
            if let Some(heldout) = &self.corpora.heldout {
                let ppl = eval_perplexity(self.student, heldout, config.seq_len)?.perplexity;
                info!("step {} held-out perplexity {ppl:.4}", step + 1);
                self.metrics.evals.push((step + 1, ppl));
            }
        }
        Ok(record)
    }

    fn snapshot(&self, lr: f64, grad_norm: f64) -> String {
        let worst = self
            .student
            .params
            .iter()
            .map(|p| (p.name.as_str(), p.tensor.max_abs()))
            .fold(("", 0.0f32), |acc, x| if x.1 > acc.1 || x.1.is_nan() { x } else { acc });
        format!(
            "lr={lr:.3e} grad_norm={grad_norm:.4e} largest_param={}({:.4e}) finite_params={}",
            worst.0,
            worst.1,
            self.student.params.iter().all(|p| p.tensor.all_finite())
        )
    }
}

type Term = (Vec<f32>, f64);

/// Row masks and coefficients for the teacher-label and hard-target terms.
fn loss_masks(targets: &[usize], seqs: usize, config: &TrainConfig) -> (Term, Term) {
    let valid: Vec<f32> = targets.iter().map(|&t| if t == PAD { 0.0 } else { 1.0 }).collect();
    match config.kd_mixing {
        KdMixing::Convex => ((valid.clone(), config.kd_ratio), (valid, 1.0 - config.kd_ratio)),
        KdMixing::PerSequence => {
            let seq_len = targets.len() / seqs.max(1);
            let kd_seqs = (config.kd_ratio * seqs as f64).round() as usize;
            let mut soft = valid.clone();
            let mut hard = valid;
            for (r, (s, h)) in soft.iter_mut().zip(hard.iter_mut()).enumerate() {
                if r / seq_len < kd_seqs {
                    *h = 0.0;
                } else {
                    *s = 0.0;
                }
            }
            ((soft, 1.0), (hard, 1.0))
        }
    }
}

/// Mean distillation cross entropy (`T = 1`) of `student` against `teacher`
/// over the evaluation windows of `corpus`.
pub fn eval_kd_loss(student: &Model, teacher: &Model, corpus: &Corpus, seq_len: usize) -> Result<f64> {
    let windows = corpus.eval_windows(seq_len.min(student.config.max_seq_len));
    let (mut total, mut rows) = (0.0f64, 0usize);
    for chunk in windows.chunks(crate::model::EVAL_BATCH) {
        let batch = Batch::from_windows(chunk);
        let targets = batch.targets.concat();
        let mask: Vec<f32> = targets.iter().map(|&t| if t == PAD { 0.0 } else { 1.0 }).collect();
        let count = mask.iter().filter(|&&m| m > 0.0).count();
        if count == 0 {
            continue;
        }
        let t_logits = teacher.logits(&batch.inputs)?;
        let mut tape = Tape::new();
        let out = student.forward(&mut tape, &batch.inputs, false)?;
        let loss = kd_loss_masked(
            &mut tape,
            out.logits,
            &t_logits,
            &targets,
            (&mask, 1.0),
            (&mask, 0.0),
            1.0,
        )?;
        total += f64::from(tape.value(loss).data()[0]) * count as f64;
        rows += count;
    }
    if rows == 0 {
        return Err(SilqError::Input(format!(
            "corpus `{}` has nothing to predict",
            corpus.name
        )));
    }
    Ok(total / rows as f64)
}
