use serde::{Deserialize, Serialize};

use crate::error::{Result, SilqError};
use crate::io::corpus::{Batch, Corpus, PAD};
use crate::tensor::{Tape, Tensor};

use super::Model;

/// Sequences per evaluation forward pass.
pub const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_loss: f64,
    pub perplexity: f64,
    pub tokens: usize,
}

/// One-hot targets and per-row weights (0 for padding).
pub(crate) fn hard_targets(targets: &[Vec<usize>], vocab: usize) -> (Tensor, Vec<f32>) {
    let rows: usize = targets.iter().map(Vec::len).sum();
    let mut t = Tensor::zeros(&[rows, vocab]);
    let mut weights = Vec::with_capacity(rows);
    for (r, &tok) in targets.iter().flatten().enumerate() {
        if tok == PAD {
            weights.push(0.0);
        } else {
            t.row_mut(r)[tok] = 1.0;
            weights.push(1.0);
        }
    }
    (t, weights)
}

/// Summed next-token cross entropy over the non-pad targets of one batch.
pub(crate) fn batch_nll(model: &Model, batch: &Batch) -> Result<(f64, usize)> {
    let (targets, weights) = hard_targets(&batch.targets, model.config.vocab_size);
    let count = weights.iter().filter(|&&w| w > 0.0).count();
    if count == 0 {
        return Ok((0.0, 0));
    }
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &batch.inputs, false)?;
    let loss = tape.cross_entropy_weighted(out.logits, &targets, &weights)?;
    Ok((f64::from(tape.value(loss).data()[0]) * count as f64, count))
}

/// Teacher-forced perplexity `exp(mean next-token cross entropy)`.
pub fn eval_perplexity(model: &Model, corpus: &Corpus, seq_len: usize) -> Result<EvalReport> {
    let windows = corpus.eval_windows(seq_len.min(model.config.max_seq_len));
    if windows.is_empty() {
        return Err(SilqError::Input(format!(
            "corpus `{}` has nothing to predict",
            corpus.name
        )));
    }
    let (mut nll, mut tokens) = (0.0f64, 0usize);
    for chunk in windows.chunks(EVAL_BATCH) {
        let (sum, count) = batch_nll(model, &Batch::from_windows(chunk))?;
        nll += sum;
        tokens += count;
    }
    let mean_loss = nll / tokens as f64;
    Ok(EvalReport {
        mean_loss,
        perplexity: mean_loss.exp(),
        tokens,
    })
}
