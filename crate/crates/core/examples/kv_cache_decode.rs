//! Token-by-token decoding through a quantized KV cache, checked against a
//! full causal forward, plus a standalone cache showing the stored codes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use silq::calib::WeightCalib;
use silq::model::{build_quantized_model, init_weights, KvCacheStore, ModelConfig, PrecisionPlan};
use silq::quant::{QuantizerSpec, Timing};
use silq::tensor::{Tape, Tensor};

fn main() -> silq::Result<()> {
    let config = ModelConfig {
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        max_seq_len: 32,
        ..Default::default()
    };
    let weights = init_weights(&config, 2)?;
    // dynamic activations and an 8-bit dynamic cache need no calibration
    let plan = PrecisionPlan::a8_w4(Timing::Dynamic, 8)?;
    let model = build_quantized_model(config, plan, &weights, WeightCalib::Mse)?;

    let prompt: Vec<usize> = b"The cache stores codes".iter().map(|&b| usize::from(b)).collect();
    let full = model.logits(&[prompt.clone()])?;

    let mut cache = model.new_cache()?;
    let mut worst = 0.0f32;
    for (t, &token) in prompt.iter().enumerate() {
        let mut tape = Tape::new();
        let out = model.forward_cached(&mut tape, &[token], &mut cache)?;
        let row = tape.value(out).row(0);
        let diff = row
            .iter()
            .zip(full.row(t))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        worst = worst.max(diff);
    }
    println!("decoded {} tokens, cache length {}", prompt.len(), cache.len());
    println!("max |cached - full| logit difference {worst:.2e}");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = QuantizerSpec::cache(4, Timing::Static)?;
    let mut store = KvCacheStore::with_static_scale(1, 8, 16, spec, 0.25)?;
    let k = Tensor::randn(&[2, 8], 1.0, &mut rng);
    let v = Tensor::randn(&[2, 8], 1.0, &mut rng);
    store.kv_write(0, &k, &v)?;
    let (k_read, _) = store.kv_read(0)?;
    println!("4-bit key codes {:?}", store.codes(0).0);
    println!("key round-trip error {:.3}", k.max_abs_diff(&k_read));
    Ok(())
}
