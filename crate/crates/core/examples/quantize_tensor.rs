//! Fake quantization of a small weight and activation, with both backward
//! rules and int4 packing of the codes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use silq::calib::calibrate_weight_mse;
use silq::quant::{
    backward_lsq_step, backward_ste, compute_dynamic_scale, pack_int4, quantize_codes, quantize_fake, unpack_int4,
    QuantizerSpec, Timing,
};
use silq::tensor::Tensor;

fn main() -> silq::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    // 4-bit per-channel weight, step from the MSE calibrator
    let w = Tensor::randn(&[4, 8], 0.5, &mut rng);
    let spec = QuantizerSpec::weight(4)?;
    let step = calibrate_weight_mse(&w, &spec)?;
    let wq = quantize_fake(&w, &step, &spec)?;
    println!("row steps     {:?}", step.values);
    println!("max |w - wq|  {:.4}", w.max_abs_diff(&wq));

    let ones = Tensor::full(w.shape(), 1.0);
    let gx = backward_ste(&w, &step, &spec, &ones)?;
    let gs = backward_lsq_step(&w, &step, &spec, &ones, true)?;
    println!(
        "STE pass-through fraction {:.2}",
        gx.data().iter().sum::<f32>() / gx.len() as f32
    );
    println!("LSQ step gradients {gs:?}");

    let codes: Vec<i8> = quantize_codes(&w, &step, &spec)?.into_iter().map(|c| c as i8).collect();
    let packed = pack_int4(&codes)?;
    assert_eq!(unpack_int4(&packed, codes.len())?, codes);
    println!("{} codes packed into {} bytes", codes.len(), packed.len());

    // 8-bit per-token dynamic activation: scale taken from each row at run time
    let x = Tensor::randn(&[3, 8], 2.0, &mut rng);
    let act = QuantizerSpec::activation(8, Timing::Dynamic)?;
    let s = compute_dynamic_scale(&x, &act)?;
    let xq = quantize_fake(&x, &s, &act)?;
    println!("per-token steps {:?}, max error {:.5}", s.values, x.max_abs_diff(&xq));
    Ok(())
}
