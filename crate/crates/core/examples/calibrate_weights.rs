//! Weight and activation calibration on a randomly initialized model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use silq::calib::{
    approx_mse, calibrate_activation, calibrate_lsq_init, mse_step, ActCalib, CalibSample, PercentileMode,
    PercentileTable, WeightCalib,
};
use silq::model::{build_quantized_model, init_weights, ModelConfig, PrecisionPlan};
use silq::quant::{QuantizerSpec, Timing};
use silq::tensor::Tensor;

fn main() -> silq::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    // the MSE proxy is convex in the step, so golden-section search finds its minimum
    let w = Tensor::randn(&[1, 512], 0.02, &mut rng);
    let s = mse_step(w.data(), 4);
    println!("4-bit MSE step {s:.6}");
    for f in [0.5, 0.8, 1.0, 1.25, 2.0] {
        println!(
            "  proxy at {f:.2} x step: {:.3e}",
            approx_mse(w.data(), f64::from(s) * f, 4)
        );
    }
    let lsq = calibrate_lsq_init(&w, &QuantizerSpec::weight(4)?)?;
    println!("LSQ init step {:.6}", lsq.values[0]);

    // heavy-tailed activations: percentile clipping against the plain maximum
    let mut values: Vec<f32> = Tensor::randn(&[20_000], 1.0, &mut rng).into_data();
    values.extend([40.0, -35.0]);
    let sample = CalibSample::from_values(values);
    let spec = QuantizerSpec::activation(8, Timing::Static)?;
    let table = PercentileTable::default();
    for method in [ActCalib::Percentile, ActCalib::Max] {
        let step = calibrate_activation(&sample, &spec, method, &table, PercentileMode::ClipRange)?;
        println!("{method:?} step {:.5}", step.values[0]);
    }

    // the same calibrators applied to every site of an A8-C8-W4 model
    let config = ModelConfig {
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        ..Default::default()
    };
    let weights = init_weights(&config, 0)?;
    let plan = PrecisionPlan::a8_w4(Timing::Static, 8)?;
    let mut model = build_quantized_model(config, plan, &weights, WeightCalib::Mse)?;
    let batches: Vec<Vec<Vec<usize>>> = (0..2)
        .map(|b| {
            (0..4)
                .map(|i| (0..16).map(|t| (b * 31 + i * 7 + t * 13) % 256).collect())
                .collect()
        })
        .collect();
    model.calibrate_activations(&batches, ActCalib::Percentile, &table, PercentileMode::ClipRange)?;
    for q in model.quantizers().iter().take(6) {
        let step = model.step_size(&q.key).expect("calibrated");
        println!("{:<24} {} bits, {} step(s)", q.key, q.spec.bits(), step.values.len());
    }
    println!("... {} quantizers in total", model.quantizers().len());
    Ok(())
}
