mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use silq::calib::{
    approx_mse, calibrate_lsq_init, calibrate_max, calibrate_percentile, calibrate_weight_mse, mse_bound, mse_step,
    CalibSample, PercentileMode, PercentileTable,
};
use silq::quant::{QuantizerSpec, Timing};
use silq::tensor::Tensor;

use common::criteria::{self, sample, SortedProxy};

#[test]
fn proxy_examples_and_loop_oracle() {
    assert!((approx_mse(&[0.0], 0.2, 4) - 0.04 / 12.0).abs() < 1e-12);
    assert!((approx_mse(&[1.0], 0.1, 4) - 0.0625).abs() < 1e-12);
    assert_eq!(mse_bound(4), 7.5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let w = sample(rng.random_range(0..3), 257, &mut rng);
        let s: f64 = rng.random_range(1e-3..0.5);
        let bits = [4u8, 8][rng.random_range(0..2)];
        let b = f64::from(1u32 << (bits - 1)) - 0.5;
        let mut want = 0.0;
        for &v in &w {
            let over = f64::from(v).abs() - s * b;
            let clip = if over > 0.0 { over * over } else { 0.0 };
            want += f64::max(s * s / 12.0, clip);
        }
        let got = approx_mse(&w, s, bits);
        assert!((got - want).abs() <= 1e-9 * want.max(1.0));
        assert!((SortedProxy::new(&w).eval(s, bits) - want).abs() <= 1e-9 * want.max(1.0));
    }
}

#[test]
fn golden_section_matches_dense_grid() {
    criteria::golden_vs_grid(50, 2).unwrap();
}

#[test]
fn single_weight_closed_form() {
    let b = mse_bound(4);
    let want = 1.0 / (b + 1.0 / (2.0 * 3f64.sqrt()));
    assert!((want - 0.12838).abs() < 5e-5);
    criteria::single_weight_closed_form().unwrap();
    let proxy = SortedProxy::new(&[1.0]);
    let grid_best = (0..100_000)
        .map(|i| 1e-8 + (1.0 / b) * i as f64 / 100_000.0)
        .min_by(|a, c| proxy.eval(*a, 4).total_cmp(&proxy.eval(*c, 4)))
        .unwrap();
    assert!((grid_best - want).abs() / want < 1e-4);
}

#[test]
fn proxy_is_midpoint_convex() {
    criteria::proxy_convexity(10_000, 3).unwrap();
}

#[test]
fn weight_mse_per_channel_and_floor() {
    let spec = QuantizerSpec::weight(4).unwrap();
    let w = Tensor::from_rows(&[&[1.0, -1.0], &[0.0, 0.0]]);
    let s = calibrate_weight_mse(&w, &spec).unwrap();
    assert!((s.values[0] - mse_step(&[1.0, -1.0], 4)).abs() < 1e-9);
    assert_eq!(s.values[1], 1e-8);
}

#[test]
fn lsq_init_examples() {
    let spec4 = QuantizerSpec::weight(4).unwrap();
    let spec8 = QuantizerSpec::weight(8).unwrap();
    let ones = Tensor::full(&[1, 5], 1.0);
    let s = calibrate_lsq_init(&ones, &spec4).unwrap().values[0];
    assert!((s - 2.0 / 7f32.sqrt()).abs() < 1e-6 && (s - 0.75593).abs() < 1e-5);
    let s = calibrate_lsq_init(&Tensor::from_rows(&[&[-1.0, 1.0]]), &spec8)
        .unwrap()
        .values[0];
    assert!((s - 0.17748).abs() < 1e-5);
    assert_eq!(
        calibrate_lsq_init(&Tensor::zeros(&[1, 3]), &spec4).unwrap().values[0],
        1e-8
    );
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = Tensor::randn(&[3, 20], 1.0, &mut rng);
    let a = calibrate_lsq_init(&w, &spec4).unwrap();
    let b = calibrate_lsq_init(&w.map(|v| 3.0 * v), &spec4).unwrap();
    for (x, y) in a.values.iter().zip(&b.values) {
        assert!((3.0 * x - y).abs() <= 1e-6 * y);
    }
}

fn act8() -> QuantizerSpec {
    QuantizerSpec::activation(8, Timing::Static).unwrap()
}

/// Sort-based quantile with linear interpolation between order statistics.
fn sorted_quantile(values: &[f32], pct: f64) -> f64 {
    let mut v: Vec<f32> = values.iter().map(|x| x.abs()).collect();
    v.sort_by(f32::total_cmp);
    let pos = pct / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    let frac = pos - lo as f64;
    if hi == lo || frac == 0.0 {
        return f64::from(v[lo]);
    }
    f64::from(v[lo]) + frac * (f64::from(v[hi]) - f64::from(v[lo]))
}

#[test]
fn percentile_table_defaults() {
    let t = PercentileTable::default();
    assert_eq!(t.lookup(4).unwrap(), 99.91);
    assert_eq!(t.lookup(8).unwrap(), 99.99);
    assert_eq!(t.lookup(16).unwrap(), 99.995);
    assert!(t.lookup(2).is_err());
    assert!(PercentileTable::new(BTreeMap::from([(4, 99.9), (8, 99.0)])).is_err());
    assert!(PercentileTable::new(BTreeMap::from([(8, 100.0)])).is_err());
}

#[test]
fn percentile_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let values: Vec<f32> = (0..100_000).map(|_| rng.random_range(0.0..1.0)).collect();
    let table = PercentileTable::default();
    let s = calibrate_percentile(
        &CalibSample::from_values(values.clone()),
        &act8(),
        &table,
        PercentileMode::ClipRange,
    )
    .unwrap()
    .values[0];
    let want = (sorted_quantile(&values, 99.99) / 127.0) as f32;
    assert_eq!(s, want);
    assert!((s - 0.9999 / 127.0).abs() < 2e-6);
    let raw = calibrate_percentile(
        &CalibSample::from_values(values.clone()),
        &act8(),
        &table,
        PercentileMode::RawValue,
    )
    .unwrap()
    .values[0];
    assert_eq!(raw, sorted_quantile(&values, 99.99) as f32);

    for trial in 0..50 {
        let n = rng.random_range(1000..5000);
        let values: Vec<f32> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let spec = QuantizerSpec::activation([4, 8, 16][trial % 3], Timing::Static).unwrap();
        let pct = table.lookup(spec.bits()).unwrap();
        let s = calibrate_percentile(
            &CalibSample::from_values(values.clone()),
            &spec,
            &table,
            PercentileMode::ClipRange,
        )
        .unwrap();
        let want = (sorted_quantile(&values, pct) / f64::from(spec.upper())) as f32;
        assert_eq!(s.values[0], want);
        let m = calibrate_max(&CalibSample::from_values(values), &spec).unwrap();
        assert!(m.values[0] >= s.values[0]);
    }
}

#[test]
fn percentile_and_max_examples() {
    let table = PercentileTable::default();
    let constant = CalibSample::from_values(vec![-0.5; 2000]);
    let s = calibrate_percentile(&constant, &act8(), &table, PercentileMode::ClipRange).unwrap();
    assert_eq!(s.values[0], 0.5 / 127.0);
    assert_eq!(s.lr_multiplier, 50.0);
    let few = CalibSample::from_values(vec![1.0; 999]);
    assert!(calibrate_percentile(&few, &act8(), &table, PercentileMode::ClipRange).is_err());
    let dynamic = QuantizerSpec::activation(8, Timing::Dynamic).unwrap();
    assert!(calibrate_percentile(&constant, &dynamic, &table, PercentileMode::ClipRange).is_err());

    let m = calibrate_max(&CalibSample::from_values(vec![-3.0, 1.0, 2.0]), &act8()).unwrap();
    assert_eq!(m.values[0], 3.0 / 127.0);
    assert!(calibrate_max(&CalibSample::default(), &act8()).is_err());
}

proptest! {
    #[test]
    fn mse_step_is_scale_equivariant(seed in 0u64..10_000, alpha in 0.05f32..20.0, bits in prop_oneof![Just(4u8), Just(8)]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = sample((seed % 3) as usize, 512, &mut rng);
        let scaled: Vec<f32> = w.iter().map(|v| v * alpha).collect();
        let (a, b) = (mse_step(&w, bits), mse_step(&scaled, bits));
        prop_assert!((f64::from(alpha * a) - f64::from(b)).abs() / f64::from(b) < 1e-5, "{} vs {}", alpha * a, b);
    }
}
