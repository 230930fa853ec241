//! Pretrains a tiny teacher, calibrates an A8-C8-W4 student from it and
//! runs a short distillation, printing held-out perplexity along the way.

use silq::calib::{ActCalib, PercentileMode, PercentileTable, WeightCalib};
use silq::distill::{eval_kd_loss, pretrain, train_qat, Corpora, TrainConfig};
use silq::io::corpus::{make_synthetic_corpus, BatchSampler, Generator};
use silq::model::{build_quantized_model, eval_perplexity, init_weights, Model, ModelConfig, PrecisionPlan};
use silq::quant::Timing;

fn main() -> silq::Result<()> {
    let corpora = Corpora {
        pretrain: make_synthetic_corpus(Generator::MarkovChain, 1, 200),
        sft: make_synthetic_corpus(Generator::TemplateDialogue, 2, 200),
        heldout: None,
    };
    let heldout = make_synthetic_corpus(Generator::TemplateDialogue, 3, 20);
    let config = ModelConfig {
        d_model: 32,
        n_heads: 2,
        d_ff: 96,
        max_seq_len: 64,
        ..Default::default()
    };

    let mut teacher = Model::full_precision(config.clone(), init_weights(&config, 0)?)?;
    let pre = TrainConfig {
        base_lr: 3e-3,
        base_steps: 300,
        steps: 300,
        batch_size: 8,
        seq_len: 32,
        ..Default::default()
    };
    pretrain(&mut teacher, &corpora, &pre)?;
    let teacher_ppl = eval_perplexity(&teacher, &heldout, 32)?.perplexity;
    println!("teacher perplexity {teacher_ppl:.3}");

    let plan = PrecisionPlan::a8_w4(Timing::Static, 8)?;
    let mut student = build_quantized_model(config, plan, &teacher.base_weights(), WeightCalib::Mse)?;
    let mut sampler = BatchSampler::new(corpora.pretrain.clone(), corpora.sft.clone(), 0.25, 8, 32, 7)?;
    let batches: Vec<_> = (0..4).map(|_| sampler.next_batch().inputs).collect();
    student.calibrate_activations(
        &batches,
        ActCalib::Percentile,
        &PercentileTable::default(),
        PercentileMode::ClipRange,
    )?;
    let report = |label: &str, m: &Model| -> silq::Result<()> {
        let ppl = eval_perplexity(m, &heldout, 32)?.perplexity;
        let kd = eval_kd_loss(m, &teacher, &heldout, 32)?;
        println!(
            "{label:<12} perplexity {ppl:.3} (gap {:+.4}), KD loss {kd:.5}",
            ppl - teacher_ppl
        );
        Ok(())
    };
    report("calibrated", &student)?;

    let qat = TrainConfig {
        base_lr: 2e-4,
        base_steps: 100,
        steps: 100,
        batch_size: 8,
        seq_len: 32,
        kd_ratio: 1.0,
        ..Default::default()
    };
    let metrics = train_qat(&mut student, &teacher, &corpora, &qat)?;
    let head: f64 = metrics.records[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    println!(
        "QAT loss, mean of first and last 10 steps: {head:.4} -> {:.4}",
        metrics.tail_loss(10)
    );
    report("after QAT", &student)?;
    Ok(())
}
