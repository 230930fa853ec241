//! Splits weight changes into a rotational part and a residual: a planted
//! rotation, a planted rotation plus noise, and a short fine-tune.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use silq::distill::{pretrain, Corpora, TrainConfig};
use silq::io::corpus::{make_synthetic_corpus, Generator};
use silq::model::{init_weights, weight_layout, Model, ModelConfig};
use silq::params::ParamKind;
use silq::rotation::{aggregate_report, decompose, layer_type_of, random_rotation, Mat};

fn main() -> silq::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w0 = Mat::randn(16, 48, &mut rng);
    let rotated = random_rotation(16, &mut rng).matmul(&w0)?;
    let e = decompose("planted", &w0.to_tensor(), &rotated.to_tensor(), true)?.expect("nonzero weight");
    println!(
        "planted rotation: side {:?}, rotational {:.4}, residual {:.2e}",
        e.side, e.rotational, e.non_rotational
    );

    let noise = Mat::randn(16, 48, &mut rng);
    let noisy: Vec<f64> = rotated
        .data()
        .iter()
        .zip(noise.data())
        .map(|(r, n)| r + 0.05 * n)
        .collect();
    let noisy = Mat::new(16, 48, noisy)?;
    let e = decompose("noisy", &w0.to_tensor(), &noisy.to_tensor(), true)?.expect("nonzero weight");
    let want = 0.05 * noise.frobenius() / w0.frobenius();
    println!("with noise: residual {:.4} (noise level {want:.4})", e.non_rotational);

    let config = ModelConfig {
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        max_seq_len: 32,
        ..Default::default()
    };
    let before = Model::full_precision(config.clone(), init_weights(&config, 0)?)?;
    let mut after = before.clone();
    let corpora = Corpora {
        pretrain: make_synthetic_corpus(Generator::MarkovChain, 1, 100),
        sft: make_synthetic_corpus(Generator::ArithmeticPatterns, 2, 100),
        heldout: None,
    };
    let tc = TrainConfig {
        base_lr: 3e-3,
        base_steps: 50,
        steps: 50,
        batch_size: 4,
        seq_len: 32,
        ..Default::default()
    };
    pretrain(&mut after, &corpora, &tc)?;

    let mut entries = Vec::new();
    let mut types = BTreeMap::new();
    for (name, _, kind) in weight_layout(&config) {
        if kind != ParamKind::Weight {
            continue;
        }
        let w0 = before.params.tensor(&name)?;
        let w1 = after.params.tensor(&name)?;
        if let Some(e) = decompose(&name, w0, w1, true)? {
            types.insert(name.clone(), layer_type_of(&name).to_string());
            entries.push(e);
        }
    }
    print!("{}", aggregate_report(entries, &types, false)?.to_tsv(&types));
    Ok(())
}
