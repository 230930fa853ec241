mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use silq::calib::{ActCalib, PercentileMode, PercentileTable, WeightCalib};
use silq::distill::{
    eval_kd_loss, kd_loss, lr_schedule, pretrain, scale_lr_for_steps, train_qat, AdamW, Corpora, KdMixing, TrainConfig,
};
use silq::io::corpus::{make_synthetic_corpus, Generator, PAD, VOCAB_SIZE};
use silq::model::{build_quantized_model, init_weights, Model, ModelConfig, PrecisionPlan};
use silq::params::{ParamKind, ParamStore};
use silq::quant::Timing;
use silq::tensor::{Tape, Tensor};
use silq::SilqError;

use common::rel_err;

fn small_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: VOCAB_SIZE,
        max_seq_len: 16,
        ..Default::default()
    }
}

fn corpora() -> Corpora {
    Corpora {
        pretrain: make_synthetic_corpus(Generator::MarkovChain, 1, 40),
        sft: make_synthetic_corpus(Generator::TemplateDialogue, 2, 40),
        heldout: Some(make_synthetic_corpus(Generator::TemplateDialogue, 3, 4)),
    }
}

fn train_config(steps: usize) -> TrainConfig {
    TrainConfig {
        base_lr: 1e-3,
        steps,
        batch_size: 4,
        seq_len: 16,
        seed: 9,
        ..Default::default()
    }
}

fn teacher() -> Model {
    let cfg = small_config();
    let mut model = Model::full_precision(cfg.clone(), init_weights(&cfg, 0).unwrap()).unwrap();
    pretrain(
        &mut model,
        &corpora(),
        &TrainConfig {
            base_lr: 1e-2,
            kd_ratio: 0.0,
            ..train_config(40)
        },
    )
    .unwrap();
    model
}

fn student(teacher: &Model) -> Model {
    let plan = PrecisionPlan::a8_w4(Timing::Static, 8).unwrap();
    let mut model =
        build_quantized_model(teacher.config.clone(), plan, &teacher.base_weights(), WeightCalib::Mse).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
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

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Row-by-row distillation loss in `f64`.
fn kd_oracle(student: &[Vec<f64>], teacher: &[Vec<f64>], targets: &[usize], r: f64, temp: f64) -> f64 {
    let (mut total, mut rows) = (0.0, 0);
    for ((s, t), &y) in student.iter().zip(teacher).zip(targets) {
        if y == PAD {
            continue;
        }
        let st: Vec<f64> = s.iter().map(|v| v / temp).collect();
        let tt: Vec<f64> = t.iter().map(|v| v / temp).collect();
        let (lq, lp) = (log_softmax(&st), log_softmax(&tt));
        let soft: f64 = -lp.iter().zip(&lq).map(|(p, q)| p.exp() * q).sum::<f64>();
        let hard = -log_softmax(s)[y];
        total += r * temp * temp * soft + (1.0 - r) * hard;
        rows += 1;
    }
    total / rows as f64
}

fn random_rows(rows: usize, vocab: usize, scale: f32, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    (0..rows)
        .map(|_| (0..vocab).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

fn as_f64(rows: &[Vec<f32>]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect()
}

fn tape_kd(student: &[Vec<f32>], teacher: &[Vec<f32>], targets: &[usize], r: f64, temp: f64) -> (f64, Vec<f32>) {
    let refs: Vec<&[f32]> = student.iter().map(|r| r.as_slice()).collect();
    let trefs: Vec<&[f32]> = teacher.iter().map(|r| r.as_slice()).collect();
    let mut tape = Tape::new();
    let s = tape.leaf(Tensor::from_rows(&refs), true);
    let loss = kd_loss(&mut tape, s, &Tensor::from_rows(&trefs), targets, r, temp).unwrap();
    let value = f64::from(tape.value(loss).data()[0]);
    tape.backward(loss).unwrap();
    (value, tape.grad(s).unwrap().data().to_vec())
}

#[test]
fn kd_loss_matches_row_oracle_and_its_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let vocab = 7;
    for (r, temp) in [(0.5, 2.0), (1.0, 1.0), (0.0, 1.0), (0.3, 0.7)] {
        let s = random_rows(5, vocab, 3.0, &mut rng);
        let t = random_rows(5, vocab, 3.0, &mut rng);
        let targets = vec![2, PAD, 0, 6, 3];
        let (value, grad) = tape_kd(&s, &t, &targets, r, temp);
        let want = kd_oracle(&as_f64(&s), &as_f64(&t), &targets, r, temp);
        assert!(rel_err(value, want, 1.0) < 1e-6, "r={r} T={temp}: {value} vs {want}");

        let h = 1e-4;
        for (i, g) in grad.iter().enumerate() {
            let (row, col) = (i / vocab, i % vocab);
            let mut plus = as_f64(&s);
            let mut minus = as_f64(&s);
            plus[row][col] += h;
            minus[row][col] -= h;
            let t64 = as_f64(&t);
            let fd =
                (kd_oracle(&plus, &t64, &targets, r, temp) - kd_oracle(&minus, &t64, &targets, r, temp)) / (2.0 * h);
            assert!((f64::from(*g) - fd).abs() < 1e-5, "grad {i}: {g} vs {fd}");
            if row == 1 {
                assert_eq!(*g, 0.0);
            }
        }
    }
}

#[test]
fn self_distillation_loss_is_teacher_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = random_rows(4, 9, 2.0, &mut rng);
    let (value, _) = tape_kd(&t, &t, &[1, 2, 3, 4], 1.0, 1.0);
    let entropy: f64 = as_f64(&t)
        .iter()
        .map(|row| -log_softmax(row).iter().map(|l| l.exp() * l).sum::<f64>())
        .sum::<f64>()
        / 4.0;
    assert!(rel_err(value, entropy, 1.0) < 1e-6);
}

#[test]
fn zero_ratio_is_plain_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = random_rows(3, 5, 2.0, &mut rng);
    let t = random_rows(3, 5, 2.0, &mut rng);
    let (value, _) = tape_kd(&s, &t, &[0, 4, 2], 0.0, 3.0);
    let ce: f64 = as_f64(&s)
        .iter()
        .zip([0, 4, 2])
        .map(|(row, y)| -log_softmax(row)[y])
        .sum::<f64>()
        / 3.0;
    assert!(rel_err(value, ce, 1.0) < 1e-6);
}

#[test]
fn kd_loss_rejects_bad_inputs() {
    let mut tape = Tape::new();
    let s = tape.leaf(Tensor::zeros(&[2, 3]), true);
    assert!(kd_loss(&mut tape, s, &Tensor::zeros(&[2, 4]), &[0, 1], 0.5, 1.0).is_err());
    assert!(kd_loss(&mut tape, s, &Tensor::zeros(&[2, 3]), &[0], 0.5, 1.0).is_err());
    assert!(kd_loss(&mut tape, s, &Tensor::zeros(&[2, 3]), &[PAD, PAD], 0.5, 1.0).is_err());
    assert!(kd_loss(&mut tape, s, &Tensor::zeros(&[2, 3]), &[0, 1], 0.5, 0.0).is_err());
}

#[test]
fn training_is_deterministic_and_leaves_the_teacher_alone() {
    let teacher = teacher();
    let before = teacher.params.clone();
    let config = train_config(6);
    let mut a = student(&teacher);
    let mut b = student(&teacher);
    let ma = train_qat(&mut a, &teacher, &corpora(), &config).unwrap();
    let mb = train_qat(&mut b, &teacher, &corpora(), &config).unwrap();
    assert_eq!(ma.records, mb.records);
    assert_eq!(ma.records.len(), 6);
    assert_eq!(a.params, b.params);
    assert_eq!(teacher.params, before);

    let prefetched = TrainConfig { prefetch: 2, ..config };
    let mut c = student(&teacher);
    let mc = train_qat(&mut c, &teacher, &corpora(), &prefetched).unwrap();
    assert_eq!(ma.records, mc.records);
    assert_eq!(a.params, c.params);
}

#[test]
fn zero_steps_leave_the_student_unchanged() {
    let teacher = teacher();
    let mut s = student(&teacher);
    let before = s.params.clone();
    let metrics = train_qat(&mut s, &teacher, &corpora(), &train_config(0)).unwrap();
    assert!(metrics.records.is_empty());
    assert_eq!(s.params, before);
}

#[test]
fn lr_trace_follows_the_schedule_and_steps_stay_positive() {
    let teacher = teacher();
    let mut s = student(&teacher);
    let config = TrainConfig {
        base_lr: 5e-2,
        ..train_config(12)
    };
    let metrics = train_qat(&mut s, &teacher, &corpora(), &config).unwrap();
    for (i, r) in metrics.records.iter().enumerate() {
        assert_eq!(r.step, i);
        assert_eq!(r.lr, lr_schedule(i, &config));
        assert!(r.loss.is_finite() && r.grad_norm.is_finite());
    }
    assert!(s.all_steps_positive());
}

#[test]
fn activation_steps_move_fifty_times_faster() {
    let teacher = teacher();
    let mut s = student(&teacher);
    train_qat(&mut s, &teacher, &corpora(), &train_config(1)).unwrap();
    let grads: Vec<Option<Tensor>> = s.params.iter().map(|_| None).collect();
    let mut opt = AdamW::new(0.9, 0.95, 1e-10, 0.1);
    opt.step(&mut s.params, &grads, 1e-4).unwrap();
    let mut act_steps = 0;
    for (p, &lr) in s.params.iter().zip(opt.last_lrs()) {
        let want = if p.kind == ParamKind::ActStep {
            50.0 * 1e-4
        } else {
            1e-4
        };
        assert!((lr - want).abs() < 1e-15, "{}: {lr}", p.name);
        act_steps += usize::from(p.kind == ParamKind::ActStep);
    }
    // 13 activation sites and 2 cache sites per plan
    assert_eq!(act_steps, 15);
}

#[test]
fn non_finite_loss_is_reported_as_divergence() {
    let teacher = teacher();
    let mut s = student(&teacher);
    s.params.tensor_mut("layers.0.w_up").unwrap().data_mut()[0] = f32::NAN;
    let err = train_qat(&mut s, &teacher, &corpora(), &train_config(3)).unwrap_err();
    assert!(matches!(err, SilqError::Divergence { step: 0, .. }), "{err}");
    assert_eq!(err.exit_code(), 3);

    let mut s = student(&teacher);
    let config = TrainConfig {
        base_lr: 1e38,
        ..train_config(20)
    };
    let err = train_qat(&mut s, &teacher, &corpora(), &config).unwrap_err();
    assert!(matches!(err, SilqError::Divergence { .. }), "{err}");
}

#[test]
fn invalid_configs_are_rejected() {
    let teacher = teacher();
    let mut s = student(&teacher);
    let c = corpora();
    let bad = [
        TrainConfig {
            dropout: 0.1,
            ..train_config(1)
        },
        TrainConfig {
            kd_ratio: 1.5,
            ..train_config(1)
        },
        TrainConfig {
            seq_len: 64,
            ..train_config(1)
        },
        TrainConfig {
            base_lr: 0.0,
            ..train_config(1)
        },
    ];
    for config in bad {
        assert!(matches!(
            train_qat(&mut s, &teacher, &c, &config),
            Err(SilqError::Config(_))
        ));
    }
    let mut fp = teacher.clone();
    assert!(pretrain(&mut fp, &c, &train_config(0)).is_ok());
    assert!(matches!(
        silq::distill::train_qat_with(&mut fp, None, &c, &train_config(1), |_| Ok(())),
        Err(SilqError::Config(_))
    ));
}

#[test]
fn mixing_modes_agree_at_the_extremes() {
    let teacher = teacher();
    for r in [0.0, 1.0] {
        let convex = TrainConfig {
            kd_ratio: r,
            ..train_config(3)
        };
        let per_seq = TrainConfig {
            kd_mixing: KdMixing::PerSequence,
            ..convex.clone()
        };
        let mut a = student(&teacher);
        let mut b = student(&teacher);
        let ma = train_qat(&mut a, &teacher, &corpora(), &convex).unwrap();
        let mb = train_qat(&mut b, &teacher, &corpora(), &per_seq).unwrap();
        assert_eq!(ma.records, mb.records, "r={r}");
    }
}

#[test]
fn short_run_reduces_distillation_loss() {
    let teacher = teacher();
    // start from noisy teacher weights so there is a gap to close
    let mut weights = teacher.base_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for p in weights.iter_mut().filter(|p| p.kind == ParamKind::Weight) {
        let std = (p.tensor.data().iter().map(|v| v * v).sum::<f32>() / p.tensor.len() as f32).sqrt();
        p.tensor
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.random_range(-std..std));
    }
    let plan = PrecisionPlan::a8_w4(Timing::Static, 8).unwrap();
    let mut s = build_quantized_model(teacher.config.clone(), plan, &weights, WeightCalib::Mse).unwrap();
    let heldout = corpora().heldout.unwrap();
    let before = eval_kd_loss(&s, &teacher, &heldout, 16).unwrap();
    let config = TrainConfig {
        base_lr: 3e-3,
        ..train_config(60)
    };
    let metrics = train_qat(&mut s, &teacher, &corpora(), &config).unwrap();
    let after = eval_kd_loss(&s, &teacher, &heldout, 16).unwrap();
    assert!(after < before, "{after} >= {before}");
    let head = metrics.records[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    assert!(metrics.tail_loss(10) < head, "{} >= {head}", metrics.tail_loss(10));
}

fn single(value: f32, kind: ParamKind) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("p", Tensor::scalar(value), kind);
    s
}

#[test]
fn adamw_matches_scalar_oracle_with_decay() {
    let (b1, b2, eps, wd, lr) = (0.9f64, 0.95f64, 1e-10f64, 0.1f64, 1e-2f64);
    let mut params = single(0.5, ParamKind::Weight);
    let mut opt = AdamW::new(b1, b2, eps, wd);
    let gs = [0.3f32, -1.2, 0.05, 2.0, -0.7];
    let (mut p, mut m, mut v) = (0.5f32, 0.0f64, 0.0f64);
    for (t, &g) in gs.iter().enumerate() {
        opt.step(&mut params, &[Some(Tensor::scalar(g))], lr).unwrap();
        let g = f64::from(g);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32 + 1));
        let vh = v / (1.0 - b2.powi(t as i32 + 1));
        let pd = f64::from(p);
        p = (pd - lr * wd * pd - lr * mh / (vh.sqrt() + eps)) as f32;
        let got = params.tensor("p").unwrap().data()[0];
        assert!((f64::from(got) - f64::from(p)).abs() < 1e-10);
    }
    assert_eq!(opt.steps_taken(), 5);
}

#[test]
fn decay_shrinks_weights_but_not_norms_or_steps() {
    for (kind, want) in [
        (ParamKind::Weight, 1.0 - 1e-3 * 0.1),
        (ParamKind::Norm, 1.0),
        (ParamKind::ActStep, 1.0),
    ] {
        let mut params = single(1.0, kind);
        let mut opt = AdamW::new(0.9, 0.95, 1e-10, 0.1);
        opt.step(&mut params, &[Some(Tensor::scalar(0.0))], 1e-3).unwrap();
        let got = f64::from(params.tensor("p").unwrap().data()[0]);
        assert!((got - want).abs() < 1e-7, "{kind:?}: {got}");
    }
}

#[test]
fn step_sizes_are_floored() {
    let mut params = single(1e-6, ParamKind::WeightStep);
    let mut opt = AdamW::new(0.9, 0.95, 1e-10, 0.0);
    opt.step(&mut params, &[Some(Tensor::scalar(1.0))], 1.0).unwrap();
    assert!(params.tensor("p").unwrap().data()[0] > 0.0);
}

#[test]
fn lr_rescaling_anchors() {
    assert!((scale_lr_for_steps(5e-6, 8000, 32000) - 2.5e-6).abs() < 1e-20);
    assert!(rel_err(scale_lr_for_steps(5e-6, 8000, 750), 1.633e-5, 1e-12) < 5e-3);
    let c = TrainConfig {
        base_lr: 2e-4,
        steps: 400,
        ..Default::default()
    };
    assert!(rel_err(lr_schedule(200, &c), 0.55 * 2e-4, 1e-12) < 1e-12);
    assert!(rel_err(lr_schedule(400, &c), 2e-5, 1e-12) < 1e-12);
}

proptest! {
    #[test]
    fn schedule_is_bounded_and_non_increasing(steps in 1usize..5000, peak in 1e-7f64..1e-1, frac in 0.0f64..1.0) {
        let c = TrainConfig { base_lr: peak, steps, min_lr_fraction: frac, ..Default::default() };
        let mut prev = f64::INFINITY;
        for k in (0..=steps).step_by((steps / 50).max(1)) {
            let lr = lr_schedule(k, &c);
            prop_assert!(lr <= peak * (1.0 + 1e-12) && lr >= frac * peak * (1.0 - 1e-12));
            prop_assert!(lr <= prev * (1.0 + 1e-12));
            prev = lr;
        }
    }

    #[test]
    fn rescaling_composes(base in 1e-7f64..1e-2, a in 1usize..100_000, b in 1usize..100_000, c in 1usize..100_000) {
        let direct = scale_lr_for_steps(base, a, c);
        let chained = scale_lr_for_steps(scale_lr_for_steps(base, a, b), b, c);
        prop_assert!(rel_err(direct, chained, 0.0) < 1e-12);
    }
}
