//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use silq::model::ModelConfig;

pub mod criteria;

/// Scalar reference of the quantizer: `round(clamp(x / s, lo, hi)) · s` with
/// ties broken to even via explicit floor arithmetic.
pub fn quant_ref(x: f32, s: f32, bits: u8) -> f32 {
    let hi = ((1i64 << (bits - 1)) - 1) as f32;
    let lo = -((1i64 << (bits - 1)) as f32);
    let mut r = x / s;
    if r < lo {
        r = lo;
    }
    if r > hi {
        r = hi;
    }
    let f = r.floor();
    let frac = r - f;
    let q = if frac > 0.5 {
        f + 1.0
    } else if frac < 0.5 {
        f
    } else if (f as i64) % 2 == 0 {
        f
    } else {
        f + 1.0
    };
    // rounding keeps the sign of a value that rounds to zero
    let q = if q == 0.0 { 0.0f32.copysign(r) } else { q };
    q * s
}

/// Relative difference with an absolute floor for near-zero values.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Two-layer `d = 16` geometry used by the gradient and oracle tests.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 24,
        max_seq_len: 16,
        ..Default::default()
    }
}

/// Parameters of a full-precision model in `f64`, keyed by name.
pub struct RefParams {
    pub values: std::collections::BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl RefParams {
    pub fn from_store(store: &silq::params::ParamStore) -> Self {
        RefParams {
            values: store
                .iter()
                .map(|p| {
                    let data = p.tensor.data().iter().map(|&v| f64::from(v)).collect();
                    (p.name.clone(), (p.tensor.shape().to_vec(), data))
                })
                .collect(),
        }
    }

    fn get(&self, name: &str) -> &[f64] {
        &self.values[name].1
    }
}

/// `x · Wᵀ` for `x: [n, in]` and `W: [out, in]`.
fn linear(x: &[Vec<f64>], w: &[f64]) -> Vec<Vec<f64>> {
    let d_in = x[0].len();
    let out = w.len() / d_in;
    x.iter()
        .map(|row| {
            (0..out)
                .map(|o| row.iter().zip(&w[o * d_in..(o + 1) * d_in]).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect()
}

fn rmsnorm(x: &[Vec<f64>], gain: &[f64], eps: f64) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            row.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
        })
        .collect()
}

/// Rotates dimension pairs `(i, i + hd/2)` of every head by `pos · θ^(-2i/hd)`.
fn rope(x: &mut [Vec<f64>], hd: usize, theta: f64) {
    let half = hd / 2;
    for (pos, row) in x.iter_mut().enumerate() {
        for head in row.chunks_mut(hd) {
            for i in 0..half {
                let ang = pos as f64 * theta.powf(-2.0 * i as f64 / hd as f64);
                let (s, c) = ang.sin_cos();
                let (a, b) = (head[i], head[i + half]);
                head[i] = a * c - b * s;
                head[i + half] = a * s + b * c;
            }
        }
    }
}

/// Plain causal transformer forward for one sequence, written directly from
/// the architecture description with no shared code.
pub fn ref_logits(p: &RefParams, cfg: &ModelConfig, tokens: &[usize]) -> Vec<Vec<f64>> {
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let eps = f64::from(cfg.norm_eps);
    let embed = p.get("embed");
    let mut h: Vec<Vec<f64>> = tokens.iter().map(|&t| embed[t * d..(t + 1) * d].to_vec()).collect();
    let n = tokens.len();
    for l in 0..cfg.n_layers {
        let name = |s: &str| format!("layers.{l}.{s}");
        let x = rmsnorm(&h, p.get(&name("attn_norm")), eps);
        let mut q = linear(&x, p.get(&name("wq")));
        let mut k = linear(&x, p.get(&name("wk")));
        let v = linear(&x, p.get(&name("wv")));
        if cfg.rotary {
            rope(&mut q, hd, f64::from(cfg.rope_theta));
            rope(&mut k, hd, f64::from(cfg.rope_theta));
        }
        let mut o = vec![vec![0.0; d]; n];
        for head in 0..cfg.n_heads {
            let cols = head * hd..(head + 1) * hd;
            for i in 0..n {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        q[i][cols.clone()]
                            .iter()
                            .zip(&k[j][cols.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    for c in cols.clone() {
                        o[i][c] += e / z * v[j][c];
                    }
                }
            }
        }
        let attn = linear(&o, p.get(&name("wo")));
        for (hr, ar) in h.iter_mut().zip(&attn) {
            hr.iter_mut().zip(ar).for_each(|(a, b)| *a += b);
        }
        let x = rmsnorm(&h, p.get(&name("mlp_norm")), eps);
        let gate = linear(&x, p.get(&name("w_gate")));
        let up = linear(&x, p.get(&name("w_up")));
        let act: Vec<Vec<f64>> = gate
            .iter()
            .zip(&up)
            .map(|(g, u)| g.iter().zip(u).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect())
            .collect();
        let down = linear(&act, p.get(&name("w_down")));
        for (hr, dr) in h.iter_mut().zip(&down) {
            hr.iter_mut().zip(dr).for_each(|(a, b)| *a += b);
        }
    }
    let x = rmsnorm(&h, p.get("final_norm"), eps);
    linear(&x, p.get("head"))
}

/// Mean next-token cross entropy over a batch of sequences.
pub fn ref_loss(p: &RefParams, cfg: &ModelConfig, inputs: &[Vec<usize>], targets: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (inp, tgt) in inputs.iter().zip(targets) {
        for (row, &t) in ref_logits(p, cfg, inp).iter().zip(tgt) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            count += 1;
        }
    }
    total / count as f64
}
