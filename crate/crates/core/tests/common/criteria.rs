//! Checks shared by the integration tests and the acceptance run. Each
//! returns a short summary on success and a description of the first
//! violation otherwise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use silq::calib::{approx_mse, mse_bound, mse_step, ActCalib, PercentileMode, PercentileTable, WeightCalib};
use silq::io::checkpoint::Checkpoint;
use silq::io::export::{load_export, max_logit_diff, parity_prompts, write_export};
use silq::model::{build_quantized_model, init_weights, Model, ModelConfig, PrecisionPlan};
use silq::quant::{
    backward_lsq_step, backward_ste, pack_int4, quantize_fake, unpack_int4, QuantizerSpec, StepSize, Timing,
};
use silq::rotation::{decompose, procrustes, random_rotation, Mat, Side};
use silq::tensor::{Tape, Tensor};

use super::{quant_ref, ref_loss, rel_err, tiny_config, RefParams};

pub type Check = Result<String, String>;

fn act_spec(bits: u8) -> QuantizerSpec {
    QuantizerSpec::activation(bits, Timing::Static).expect("valid width")
}

/// Bit-exact agreement of fake quantization with [`quant_ref`] on random
/// `(x, s, bits)` triples, about a tenth of them exact ties.
pub fn quantizer_oracle(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ties = 0;
    for _ in 0..cases {
        let bits = [2u8, 4, 8, 16][rng.random_range(0..4)];
        let s: f32 = 10f32.powf(rng.random_range(-3.0..1.0));
        let upper = ((1i64 << (bits - 1)) + 4) as f32;
        let x = if rng.random_bool(0.1) {
            ties += 1;
            (rng.random_range(-upper as i64..upper as i64) as f32 + 0.5) * s
        } else {
            rng.random_range(-1.2 * upper..1.2 * upper) * s
        };
        let got = quantize_fake(&Tensor::from_vec(vec![x]), &StepSize::scalar(s), &act_spec(bits))
            .map_err(|e| e.to_string())?
            .data()[0];
        let want = quant_ref(x, s, bits);
        if got.to_bits() != want.to_bits() {
            return Err(format!("x={x} s={s} bits={bits}: {got} vs {want}"));
        }
    }
    Ok(format!("{cases} cases bit-identical ({ties} ties)"))
}

/// `s · (clamp(x/s) + δ)` with `δ = round(x₀/s₀) − x₀/s₀` frozen at the
/// evaluation point. The straight-through and LSQ rules are its exact
/// derivatives.
pub fn surrogate(x: f64, s: f64, s0: f64, x0: f64, bits: u8) -> f64 {
    let hi = ((1i64 << (bits - 1)) - 1) as f64;
    let lo = -((1i64 << (bits - 1)) as f64);
    let r0 = (x0 / s0).clamp(lo, hi);
    let delta = r0.round_ties_even() - r0;
    s * ((x / s).clamp(lo, hi) + delta)
}

/// A point whose scaled value is at least 1e-3 from any rounding boundary
/// and from the clamp edges.
pub fn safe_point(rng: &mut ChaCha8Rng, s: f32, bits: u8) -> f32 {
    let hi = ((1i64 << (bits - 1)) - 1) as f32;
    loop {
        let r: f32 = rng.random_range(-1.5 * hi - 2.0..1.5 * hi + 2.0);
        let frac = r - r.floor();
        let edge = [(r - hi).abs(), (r + hi + 1.0).abs()];
        if (frac - 0.5).abs() > 1e-3 && edge.iter().all(|&e| e > 1e-3) {
            return r * s;
        }
    }
}

/// STE data gradients and LSQ step gradients against central differences
/// of [`surrogate`], 1e-3 relative.
pub fn quantizer_gradients(per_width: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5f64;
    let mut worst = 0.0f64;
    for bits in [2u8, 4, 8] {
        for _ in 0..per_width {
            let s = rng.random_range(0.05f32..2.0);
            let x = safe_point(&mut rng, s, bits);
            let g_out: f32 = rng.random_range(-2.0..2.0);
            let (xd, sd) = (f64::from(x), f64::from(s));
            let t = Tensor::from_vec(vec![x]);
            let g = Tensor::from_vec(vec![g_out]);
            let step = StepSize::scalar(s);

            let gx = backward_ste(&t, &step, &act_spec(bits), &g)
                .map_err(|e| e.to_string())?
                .data()[0];
            let fd_x = f64::from(g_out)
                * (surrogate(xd + h * sd, sd, sd, xd, bits) - surrogate(xd - h * sd, sd, sd, xd, bits))
                / (2.0 * h * sd);
            let ex = rel_err(f64::from(gx), fd_x, 1e-6);

            let gs = backward_lsq_step(&t, &step, &act_spec(bits), &g, false).map_err(|e| e.to_string())?[0];
            let fd_s = f64::from(g_out)
                * (surrogate(xd, sd * (1.0 + h), sd, xd, bits) - surrogate(xd, sd * (1.0 - h), sd, xd, bits))
                / (2.0 * h * sd);
            let es = rel_err(f64::from(gs), fd_s, 1e-3);
            if ex >= 1e-3 || es >= 1e-3 {
                return Err(format!(
                    "bits={bits} x={x} s={s}: ste {gx} vs {fd_x}, lsq {gs} vs {fd_s}"
                ));
            }
            worst = worst.max(ex).max(es);
        }
    }
    Ok(format!("{} points, worst relative error {worst:.2e}", 3 * per_width))
}

/// Tape gradients of a full-precision 2-layer model against central
/// differences of the `f64` reference loss. Returns `(agreeing, total)`
/// with agreement at 1e-3 relative.
pub fn model_gradient_agreement(seed: u64) -> Result<(usize, usize), String> {
    let cfg = tiny_config();
    let weights = init_weights(&cfg, seed).map_err(|e| e.to_string())?;
    let mut model = Model::full_precision(cfg.clone(), weights).map_err(|e| e.to_string())?;
    // larger norm gains and weights keep gradients well away from zero
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for p in model.params.iter_mut() {
        for v in p.tensor.data_mut() {
            *v *= rng.random_range(1.0..3.0);
        }
    }
    let tokens = |rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
        (0..2)
            .map(|_| (0..8).map(|_| rng.random_range(0..cfg.vocab_size)).collect())
            .collect()
    };
    let inputs = tokens(&mut rng);
    let targets = tokens(&mut rng);

    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &inputs, true).map_err(|e| e.to_string())?;
    let mut onehot = Tensor::zeros(&[16, cfg.vocab_size]);
    for (r, &t) in targets.iter().flatten().enumerate() {
        onehot.row_mut(r)[t] = 1.0;
    }
    let loss = tape
        .cross_entropy_soft(out.logits, &onehot)
        .map_err(|e| e.to_string())?;
    tape.backward(loss).map_err(|e| e.to_string())?;

    let mut refp = RefParams::from_store(&model.params);
    let base = ref_loss(&refp, &cfg, &inputs, &targets);
    let got = f64::from(tape.value(loss).data()[0]);
    if rel_err(got, base, 1.0) >= 1e-5 {
        return Err(format!("forward loss {got} vs reference {base}"));
    }
    let h = 1e-4;
    let (mut total, mut good) = (0usize, 0usize);
    for (i, p) in model.params.iter().enumerate() {
        let g = tape
            .grad(out.params[i])
            .ok_or_else(|| format!("no gradient for `{}`", p.name))?;
        for j in 0..p.tensor.len() {
            let orig = refp.values[&p.name].1[j];
            let mut at = |v: f64| {
                refp.values.get_mut(&p.name).expect("known name").1[j] = v;
                ref_loss(&refp, &cfg, &inputs, &targets)
            };
            let fd = (at(orig + h) - at(orig - h)) / (2.0 * h);
            at(orig);
            total += 1;
            good += usize::from(rel_err(f64::from(g.data()[j]), fd, 1e-8) < 1e-3);
        }
    }
    Ok((good, total))
}

/// `ε̂` from sorted magnitudes and prefix sums, an evaluation path that shares
/// nothing with the library's per-element loop.
pub struct SortedProxy {
    pub mags: Vec<f64>,
    /// `prefix[k] = Σ_{i<k} mags[i]`, `prefix_sq[k] = Σ_{i<k} mags[i]²`
    prefix: Vec<f64>,
    prefix_sq: Vec<f64>,
}

impl SortedProxy {
    pub fn new(w: &[f32]) -> Self {
        let mut mags: Vec<f64> = w.iter().map(|v| f64::from(v.abs())).collect();
        mags.sort_by(f64::total_cmp);
        let mut prefix = vec![0.0];
        let mut prefix_sq = vec![0.0];
        for m in &mags {
            prefix.push(prefix.last().unwrap() + m);
            prefix_sq.push(prefix_sq.last().unwrap() + m * m);
        }
        SortedProxy {
            mags,
            prefix,
            prefix_sq,
        }
    }

    pub fn eval(&self, s: f64, bits: u8) -> f64 {
        let b = f64::from(1u32 << (bits - 1)) - 0.5;
        let n = self.mags.len();
        // magnitudes whose clipping error exceeds the in-bin error
        let cut = s * b + s / 12f64.sqrt();
        let k = self.mags.partition_point(|&m| m <= cut);
        let tail = (n - k) as f64;
        let sum = self.prefix[n] - self.prefix[k];
        let sum_sq = self.prefix_sq[n] - self.prefix_sq[k];
        let clipped = sum_sq - 2.0 * s * b * sum + tail * s * s * b * b;
        k as f64 * s * s / 12.0 + clipped
    }
}

/// Gaussian (`kind` 0), Laplace (1) or uniform (2) values at a random scale.
pub fn sample(kind: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let scale = rng.random_range(0.01f32..2.0);
    match kind {
        0 => {
            let d = Normal::new(0.0f32, scale).unwrap();
            (0..n).map(|_| d.sample(rng)).collect()
        }
        1 => {
            // Laplace by inverse CDF
            (0..n)
                .map(|_| {
                    let u: f32 = rng.random_range(-0.5..0.5);
                    -scale * u.signum() * (1.0 - 2.0 * u.abs()).max(1e-12).ln()
                })
                .collect()
        }
        _ => {
            let d = Uniform::new(-scale, scale).unwrap();
            (0..n).map(|_| d.sample(rng)).collect()
        }
    }
}

/// Golden-section step sizes against a 10^5-point grid of [`SortedProxy`]:
/// proxy value within 1e-4 relative, step within 1e-3 relative.
pub fn golden_vs_grid(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let bits = if case % 2 == 0 { 4 } else { 8 };
        let w = sample(case % 3, 4096, &mut rng);
        let proxy = SortedProxy::new(&w);
        let upper = proxy.mags.last().copied().unwrap() / mse_bound(bits);
        let grid = 100_000;
        let (mut best_s, mut best) = (0.0, f64::INFINITY);
        for i in 0..grid {
            let s = 1e-8 + (upper - 1e-8) * (i as f64 + 0.5) / grid as f64;
            let e = proxy.eval(s, bits);
            if e < best {
                best = e;
                best_s = s;
            }
        }
        let s_star = f64::from(mse_step(&w, bits));
        let e_star = proxy.eval(s_star, bits);
        if e_star > best * (1.0 + 1e-4) || (s_star - best_s).abs() / best_s >= 1e-3 {
            return Err(format!(
                "case {case}: s* {s_star} (ε̂ {e_star}) vs grid {best_s} (ε̂ {best})"
            ));
        }
        worst = worst.max((e_star - best) / best);
    }
    Ok(format!("{cases} vectors, worst excess over grid {worst:.2e}"))
}

/// A single weight of magnitude 1 at 4 bits gives `s* = 1/(b + 1/(2√3))`.
pub fn single_weight_closed_form() -> Check {
    let want = 1.0 / (mse_bound(4) + 1.0 / (2.0 * 3f64.sqrt()));
    for sign in [1.0f32, -1.0] {
        let s = f64::from(mse_step(&[sign], 4));
        if (s - want).abs() / want >= 1e-4 {
            return Err(format!("w={sign}: {s} vs {want}"));
        }
    }
    Ok(format!("s* = {want:.6}"))
}

/// `ε̂((s₁+s₂)/2) ≤ (ε̂(s₁)+ε̂(s₂))/2` on random triples.
pub fn proxy_convexity(triples: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..triples {
        let w = sample(rng.random_range(0..3), 64, &mut rng);
        let bits = [2u8, 4, 8][rng.random_range(0..3)];
        let max = w.iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
        let hi = 2.0 * max / mse_bound(bits);
        let (s1, s2) = (rng.random_range(1e-6..hi), rng.random_range(1e-6..hi));
        let mid = approx_mse(&w, 0.5 * (s1 + s2), bits);
        let avg = 0.5 * (approx_mse(&w, s1, bits) + approx_mse(&w, s2, bits));
        if mid > avg + 1e-9 {
            return Err(format!("s1={s1} s2={s2}: {mid} > {avg}"));
        }
    }
    Ok(format!("{triples} triples"))
}

fn mat_add(a: &Mat, b: &Mat) -> Mat {
    Mat::new(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    )
    .unwrap()
}

fn mat_scale(m: &Mat, f: f64) -> Mat {
    Mat::new(m.rows(), m.cols(), m.data().iter().map(|v| v * f).collect()).unwrap()
}

/// Pure rotations applied from either side leave a non-rotational part
/// below 1e-6 of `‖W₀‖_F`.
pub fn planted_rotation(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (rows, cols) in [(16, 16), (64, 256), (256, 64)] {
        let w0 = Mat::randn(rows, cols, &mut rng);
        for side in [Side::Left, Side::Right] {
            let w1 = match side {
                Side::Left => random_rotation(rows, &mut rng).matmul(&w0),
                Side::Right => w0.matmul(&random_rotation(cols, &mut rng)),
            }
            .map_err(|e| e.to_string())?;
            let e = decompose("w", &w0.to_tensor(), &w1.to_tensor(), true)
                .map_err(|e| e.to_string())?
                .ok_or("zero weight")?;
            if e.non_rotational >= 1e-6 {
                return Err(format!("{rows}x{cols} {side}: non-rotational {:.3e}", e.non_rotational));
            }
            worst = worst.max(e.non_rotational);
        }
    }
    Ok(format!("worst non-rotational {worst:.2e}"))
}

/// Rotation plus Gaussian noise at a known relative level: the recovered
/// non-rotational part lies within 20% of the level.
pub fn planted_rotation_with_noise(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Vec::new();
    for level in [0.01, 0.1] {
        let w0 = Mat::randn(32, 64, &mut rng);
        let r = random_rotation(32, &mut rng);
        let noise = Mat::randn(32, 64, &mut rng);
        let noise = mat_scale(&noise, level * w0.frobenius() / noise.frobenius());
        let w1 = mat_add(&r.matmul(&w0).map_err(|e| e.to_string())?, &noise);
        let e = decompose("w", &w0.to_tensor(), &w1.to_tensor(), true)
            .map_err(|e| e.to_string())?
            .ok_or("zero weight")?;
        if (e.non_rotational - level).abs() >= 0.2 * level {
            return Err(format!("noise {level}: recovered {:.4e}", e.non_rotational));
        }
        report.push(format!("{level} -> {:.4}", e.non_rotational));
    }
    Ok(report.join(", "))
}

/// The Procrustes residual never exceeds the plain difference `‖W₁ − W₀‖`.
pub fn residual_below_difference(pairs: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..pairs {
        let (rows, cols) = (rng.random_range(1..5), rng.random_range(1..5));
        let w0 = Mat::randn(rows, cols, &mut rng);
        let step: f64 = rng.random_range(0.0..2.0);
        let w1 = mat_add(&w0, &mat_scale(&Mat::randn(rows, cols, &mut rng), step));
        let special = rng.random_bool(0.5);
        let d_f = w1.sub(&w0).map_err(|e| e.to_string())?.frobenius();
        for side in [Side::Left, Side::Right] {
            let sol = procrustes(&w0, &w1, side, special).map_err(|e| e.to_string())?;
            if sol.residual > d_f * (1.0 + 1e-12) + 1e-12 {
                return Err(format!("{rows}x{cols} {side}: d_p {} > d_f {d_f}", sol.residual));
            }
        }
    }
    Ok(format!("{pairs} pairs"))
}

/// Small calibrated A8-W4 student for the export checks.
pub fn export_student(timing: Timing, cache_bits: u8, seed: u64) -> Model {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
        ..Default::default()
    };
    let weights = init_weights(&cfg, seed).unwrap();
    let plan = PrecisionPlan::a8_w4(timing, cache_bits).unwrap();
    let mut model = build_quantized_model(cfg, plan, &weights, WeightCalib::Mse).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let batches: Vec<Vec<Vec<usize>>> = (0..2)
        .map(|_| {
            (0..8)
                .map(|_| (0..16).map(|_| rng.random_range(0..256)).collect())
                .collect()
        })
        .collect();
    model
        .calibrate_activations(
            &batches,
            ActCalib::Percentile,
            &PercentileTable::default(),
            PercentileMode::ClipRange,
        )
        .unwrap();
    model
}

/// Integer export reloaded through dequantized weights matches the
/// fake-quant model within 1e-5 on 16 random prompts.
pub fn export_parity(dir: &std::path::Path) -> Check {
    let mut worst = 0.0f32;
    for (i, (timing, cache)) in [(Timing::Static, 8), (Timing::Dynamic, 4)].into_iter().enumerate() {
        let model = export_student(timing, cache, 5);
        let path = dir.join(format!("export{i}"));
        write_export(&model, &path, 1).map_err(|e| e.to_string())?;
        let reloaded = load_export(&path).map_err(|e| e.to_string())?;
        let prompts = parity_prompts(&model, 16, 16, 2);
        let diff = max_logit_diff(&model, &reloaded, &prompts).map_err(|e| e.to_string())?;
        if diff > 1e-5 {
            return Err(format!("plan {i}: max logit difference {diff:e}"));
        }
        worst = worst.max(diff);
    }
    Ok(format!("max abs logit difference {worst:.2e}"))
}

/// Checkpoint save/load keeps every parameter bit; resaving reproduces the
/// same bytes.
pub fn checkpoint_round_trip(dir: &std::path::Path) -> Check {
    let model = export_student(Timing::Static, 8, 7);
    let (a, b) = (dir.join("a"), dir.join("b"));
    Checkpoint::new(model.clone(), 3).save(&a).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&a).map_err(|e| e.to_string())?;
    for (p, q) in model.params.iter().zip(loaded.model.params.iter()) {
        let same = p.name == q.name
            && p.tensor.shape() == q.tensor.shape()
            && p.tensor
                .data()
                .iter()
                .zip(q.tensor.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            return Err(format!("`{}` changed", p.name));
        }
    }
    if loaded.model != model {
        return Err("model metadata changed".into());
    }
    loaded.save(&b).map_err(|e| e.to_string())?;
    for file in ["manifest.json", "tensors.bin"] {
        if std::fs::read(a.join(file)).ok() != std::fs::read(b.join(file)).ok() {
            return Err(format!("{file} differs after a second save"));
        }
    }
    Ok(format!("{} tensors bit-exact", model.params.len()))
}

/// Every nibble pair and random code vectors survive packing.
pub fn int4_round_trip(vectors: usize, seed: u64) -> Check {
    for a in -8i8..=7 {
        for b in -8i8..=7 {
            let bytes = pack_int4(&[a, b]).map_err(|e| e.to_string())?;
            if unpack_int4(&bytes, 2).map_err(|e| e.to_string())? != [a, b] {
                return Err(format!("pair ({a}, {b})"));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..vectors {
        let n = rng.random_range(0..64);
        let v: Vec<i8> = (0..n).map(|_| rng.random_range(-8..=7)).collect();
        let back = unpack_int4(&pack_int4(&v).map_err(|e| e.to_string())?, n).map_err(|e| e.to_string())?;
        if back != v {
            return Err(format!("vector {v:?}"));
        }
    }
    Ok(format!("256 pairs and {vectors} vectors"))
}
