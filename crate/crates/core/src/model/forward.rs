use std::collections::BTreeMap;

use crate::error::{Result, SilqError};
use crate::quant::Timing;
use crate::tensor::{Tape, Tensor, Value};

use super::{KvCacheStore, Model};

/// Result of a forward pass recorded on a tape.
#[derive(Debug)]
pub struct ForwardOutput {
    /// `[rows, vocab]` logits, one row per input position.
    pub logits: Value,
    /// Tape leaf of every model parameter, in [`crate::params::ParamStore`] order.
    pub params: Vec<Value>,
    /// How many times each quantizer ran.
    pub coverage: BTreeMap<String, usize>,
}

enum Mode<'a> {
    Quantize,
    /// Static activation/cache sites pass data through and record it.
    Collect(&'a mut BTreeMap<String, Vec<Tensor>>),
}

enum Attention<'a> {
    Batched { seqs: usize, seq_len: usize },
    Cached { store: &'a mut KvCacheStore, start: usize },
}

struct Run<'m, 'a> {
    model: &'m Model,
    params: Vec<Value>,
    mode: Mode<'a>,
    coverage: BTreeMap<String, usize>,
}

impl Run<'_, '_> {
    fn param(&self, name: &str) -> Result<Value> {
        self.model
            .params
            .position(name)
            .map(|i| self.params[i])
            .ok_or_else(|| SilqError::Input(format!("missing parameter `{name}`")))
    }

    fn bump(&mut self, key: &str) {
        *self.coverage.entry(key.to_string()).or_insert(0) += 1;
    }

    /// Weight `name`, fake-quantized when its site is enabled.
    fn weight(&mut self, tape: &mut Tape, name: &str) -> Result<Value> {
        let w = self.param(name)?;
        let Some(q) = self.model.quantizer(name) else {
            return Ok(w);
        };
        let step = q.step.map(|i| self.params[i]);
        let spec = q.spec;
        self.bump(name);
        tape.fake_quant(w, step, spec, self.model.lsq_grad_scale)
    }

    /// Activation site `key` applied to `x`.
    fn act(&mut self, tape: &mut Tape, key: &str, x: Value) -> Result<Value> {
        let Some(q) = self.model.quantizer(key) else {
            return Ok(x);
        };
        let (spec, step) = (q.spec, q.step.map(|i| self.params[i]));
        self.bump(key);
        if let Mode::Collect(store) = &mut self.mode {
            if spec.timing() == Timing::Static {
                store.entry(key.to_string()).or_default().push(tape.value(x).clone());
                return Ok(x);
            }
        }
        tape.fake_quant(x, step, spec, self.model.lsq_grad_scale)
    }

    fn block(
        &mut self,
        tape: &mut Tape,
        layer: usize,
        h: Value,
        positions: &[usize],
        attention: &mut Attention<'_>,
    ) -> Result<Value> {
        let cfg = &self.model.config;
        let (eps, hd, n_heads) = (cfg.norm_eps, cfg.head_dim(), cfg.n_heads);
        let (rotary, theta) = (cfg.rotary, cfg.rope_theta);
        let name = |n: &str| format!("layers.{layer}.{n}");

        let x = tape.rmsnorm(h, self.param(&name("attn_norm"))?, eps)?;
        let x = self.act(tape, &name("attn_input_act"), x)?;
        let wq = self.weight(tape, &name("wq"))?;
        let wk = self.weight(tape, &name("wk"))?;
        let wv = self.weight(tape, &name("wv"))?;
        let mut q = tape.matmul_nt(x, wq)?;
        let mut k = tape.matmul_nt(x, wk)?;
        let v = tape.matmul_nt(x, wv)?;
        if rotary {
            q = tape.rope(q, positions, hd, theta)?;
            k = tape.rope(k, positions, hd, theta)?;
        }
        let q = self.act(tape, &name("query_out"), q)?;

        let (k, v, seqs, q_len, offset) = match attention {
            Attention::Batched { seqs, seq_len } => {
                let k = self.act(tape, &name("key_cache"), k)?;
                let v = self.act(tape, &name("value_cache"), v)?;
                (k, v, *seqs, *seq_len, 0)
            }
            Attention::Cached { store, start } => {
                for site in ["key_cache", "value_cache"] {
                    if self.model.quantizer(&name(site)).is_some() {
                        self.bump(&name(site));
                    }
                }
                store.kv_write(layer, tape.value(k), tape.value(v))?;
                let (keys, values) = store.kv_read(layer)?;
                let q_len = positions.len();
                (tape.constant(keys), tape.constant(values), 1, q_len, *start)
            }
        };

        let probs_key = name("attn_probs");
        let inv_sqrt = 1.0 / (hd as f32).sqrt();
        let k_len = offset + q_len;
        let mut per_seq = Vec::with_capacity(seqs);
        for s in 0..seqs {
            let mut heads = Vec::with_capacity(n_heads);
            for head in 0..n_heads {
                let qh = tape.block(q, s * q_len, q_len, head * hd, hd)?;
                let kh = tape.block(k, s * k_len, k_len, head * hd, hd)?;
                let vh = tape.block(v, s * k_len, k_len, head * hd, hd)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, inv_sqrt);
                let scores = tape.causal_mask(scores, offset)?;
                let p = tape.softmax(scores, 1)?;
                let p = self.act(tape, &probs_key, p)?;
                heads.push(tape.matmul(p, vh)?);
            }
            per_seq.push(if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_cols(&heads)?
            });
        }
        let o = if per_seq.len() == 1 {
            per_seq[0]
        } else {
            tape.concat_rows(&per_seq)?
        };
        let o = self.act(tape, &name("o_input_act"), o)?;
        let wo = self.weight(tape, &name("wo"))?;
        let attn_out = tape.matmul_nt(o, wo)?;
        let h = tape.add(h, attn_out)?;

        let x = tape.rmsnorm(h, self.param(&name("mlp_norm"))?, eps)?;
        let x = self.act(tape, &name("mlp_input_act"), x)?;
        let w_gate = self.weight(tape, &name("w_gate"))?;
        let w_up = self.weight(tape, &name("w_up"))?;
        let gate = tape.matmul_nt(x, w_gate)?;
        let gate = tape.silu(gate);
        let up = tape.matmul_nt(x, w_up)?;
        let a = tape.mul(gate, up)?;
        let a = self.act(tape, &name("down_input_act"), a)?;
        let w_down = self.weight(tape, &name("w_down"))?;
        let mlp_out = tape.matmul_nt(a, w_down)?;
        tape.add(h, mlp_out)
    }
}

impl Model {
    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        let vocab = self.config.vocab_size;
        match tokens.iter().find(|&&t| t >= vocab) {
            Some(bad) => Err(SilqError::Input(format!("token {bad} outside vocabulary of {vocab}"))),
            None => Ok(()),
        }
    }

    fn run(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        positions: &[usize],
        mut attention: Attention<'_>,
        mode: Mode<'_>,
        trainable: bool,
    ) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        let params = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), trainable))
            .collect();
        let mut run = Run {
            model: self,
            params,
            mode,
            coverage: BTreeMap::new(),
        };
        let mut h = tape.embedding(run.param("embed")?, tokens)?;
        for layer in 0..self.config.n_layers {
            h = run.block(tape, layer, h, positions, &mut attention)?;
        }
        let x = tape.rmsnorm(h, run.param("final_norm")?, self.config.norm_eps)?;
        let x = run.act(tape, "head_input_act", x)?;
        let head = run.weight(tape, "head")?;
        let logits = tape.matmul_nt(x, head)?;
        Ok(ForwardOutput {
            logits,
            params: run.params,
            coverage: run.coverage,
        })
    }

    fn flatten(&self, batch: &[Vec<usize>]) -> Result<(Vec<usize>, Vec<usize>, usize)> {
        let seq_len = batch.first().map_or(0, Vec::len);
        if seq_len == 0 || batch.iter().any(|s| s.len() != seq_len) {
            return Err(SilqError::Input(
                "batch must hold non-empty sequences of equal length".into(),
            ));
        }
        if seq_len > self.config.max_seq_len {
            return Err(SilqError::Input(format!(
                "sequence length {seq_len} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let tokens = batch.concat();
        let positions = (0..tokens.len()).map(|i| i % seq_len).collect();
        Ok((tokens, positions, seq_len))
    }

    /// Causal forward over a batch of equal-length sequences. Logit rows are
    /// ordered sequence-major.
    pub fn forward(&self, tape: &mut Tape, batch: &[Vec<usize>], trainable: bool) -> Result<ForwardOutput> {
        let (tokens, positions, seq_len) = self.flatten(batch)?;
        let attention = Attention::Batched {
            seqs: batch.len(),
            seq_len,
        };
        self.run(tape, &tokens, &positions, attention, Mode::Quantize, trainable)
    }

    /// Logits without gradient tracking.
    pub fn logits(&self, batch: &[Vec<usize>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, false)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Extends one sequence by `tokens`, reading and writing `cache`.
    /// Returns logits for the new positions.
    pub fn forward_cached(&self, tape: &mut Tape, tokens: &[usize], cache: &mut KvCacheStore) -> Result<Value> {
        if tokens.is_empty() {
            return Err(SilqError::Input("no tokens to decode".into()));
        }
        let start = cache.len();
        let positions: Vec<usize> = (start..start + tokens.len()).collect();
        let attention = Attention::Cached { store: cache, start };
        Ok(self
            .run(tape, tokens, &positions, attention, Mode::Quantize, false)?
            .logits)
    }

    /// Inputs seen by every static activation and cache quantizer, with those
    /// sites bypassed; weights stay quantized.
    pub fn collect_activations(&self, batch: &[Vec<usize>]) -> Result<BTreeMap<String, Vec<Tensor>>> {
        let (tokens, positions, seq_len) = self.flatten(batch)?;
        let mut store = BTreeMap::new();
        let mut tape = Tape::new();
        let attention = Attention::Batched {
            seqs: batch.len(),
            seq_len,
        };
        self.run(
            &mut tape,
            &tokens,
            &positions,
            attention,
            Mode::Collect(&mut store),
            false,
        )?;
        Ok(store)
    }
}
