//! Exports a W4 student as integer codes plus scales, reloads it and
//! compares its logits with the fake-quantized original.

use silq::calib::WeightCalib;
use silq::io::export::{export_verified, load_export, max_logit_diff, parity_prompts};
use silq::model::{build_quantized_model, init_weights, ModelConfig, PrecisionPlan};
use silq::quant::Timing;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = ModelConfig {
        d_model: 64,
        n_heads: 4,
        d_ff: 256,
        max_seq_len: 32,
        ..Default::default()
    };
    let weights = init_weights(&config, 4)?;
    let plan = PrecisionPlan::a8_w4(Timing::Dynamic, 8)?;
    let model = build_quantized_model(config, plan, &weights, WeightCalib::Mse)?;

    let dir = tempfile::tempdir()?;
    let target = dir.path().join("export");
    let summary = export_verified(&model, &target, 0, 16)?;
    let f32_bytes = 4 * model.params.element_count() as u64;
    println!("{} quantized tensors", summary.quantized_tensors);
    println!(
        "payload {} bytes (predicted {}), {:.2}x smaller than f32",
        summary.payload_bytes,
        summary.analytic_payload_bytes,
        f32_bytes as f64 / summary.payload_bytes as f64
    );
    println!("parity: max logit difference {:.2e}", summary.max_logit_diff);

    let reloaded = load_export(&target)?;
    let prompts = parity_prompts(&model, 4, 8, 99);
    println!(
        "fresh prompts: max logit difference {:.2e}",
        max_logit_diff(&model, &reloaded, &prompts)?
    );
    Ok(())
}
