//! One-shot step-size initialization.
//!
//! Activations: percentile of collected magnitudes (or plain max). Weights:
//! minimizer of the convex error proxy
//! `ε̂(s) = Σ max(s²/12, H(|w|-s·b)·(|w|-s·b)²)` with `b = 2^(p-1) - 0.5`,
//! or the LSQ initializer `2·mean|w| / sqrt(b_u)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SilqError};
use crate::quant::{QuantizerSpec, Role, StepSize, Timing, ACT_LR_MULTIPLIER, STEP_FLOOR};
use crate::tensor::Tensor;

/// Fewest scalars accepted by the percentile calibrator.
pub const MIN_PERCENTILE_SAMPLES: usize = 1000;

/// Relative bracket width at which golden-section search stops.
pub const GOLDEN_TOLERANCE: f64 = 1e-6;

/// Activations collected at one quantizer site.
#[derive(Debug, Clone, Default)]
pub struct CalibSample {
    pub tensors: Vec<Tensor>,
    pub batches: usize,
    pub samples: usize,
}

impl CalibSample {
    pub fn from_values(values: Vec<f32>) -> Self {
        CalibSample {
            tensors: vec![Tensor::from_vec(values)],
            batches: 1,
            samples: 1,
        }
    }

    pub fn push(&mut self, t: Tensor) {
        self.tensors.push(t);
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    fn magnitudes(&self) -> Vec<f32> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().map(|v| v.abs()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileTable {
    entries: BTreeMap<u8, f64>,
}

impl Default for PercentileTable {
    fn default() -> Self {
        PercentileTable {
            entries: BTreeMap::from([(4, 99.91), (8, 99.99), (16, 99.995)]),
        }
    }
}

impl PercentileTable {
    pub fn new(entries: BTreeMap<u8, f64>) -> Result<Self> {
        let mut prev = 0.0;
        for (&bits, &pct) in &entries {
            if !(pct > 0.0 && pct < 100.0) || pct <= prev {
                return Err(SilqError::Input(format!(
                    "percentile {pct} for {bits} bits must lie in (0, 100) and increase with bits"
                )));
            }
            prev = pct;
        }
        Ok(PercentileTable { entries })
    }

    pub fn lookup(&self, bits: u8) -> Result<f64> {
        self.entries
            .get(&bits)
            .copied()
            .ok_or_else(|| SilqError::Input(format!("no calibration percentile for {bits}-bit sites")))
    }
}

/// How a percentile value becomes a step size.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PercentileMode {
    /// The percentile is the clip range: `s = q / b_u`.
    #[default]
    ClipRange,
    /// The percentile is used as the step size itself.
    RawValue,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActCalib {
    #[default]
    Percentile,
    Max,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightCalib {
    #[default]
    Mse,
    Lsq,
}

/// Quantile with linear interpolation between the closest order statistics.
/// Reorders `values` in place.
pub fn quantile(values: &mut [f32], pct: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty set");
    let pos = pct / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let frac = pos - lo as f64;
    let (_, &mut lo_v, upper) = values.select_nth_unstable_by(lo, f32::total_cmp);
    let lo_v = f64::from(lo_v);
    if hi == lo || frac == 0.0 {
        return lo_v;
    }
    // the next order statistic is the minimum of the upper partition
    let hi_v = f64::from(upper.iter().copied().fold(f32::INFINITY, f32::min));
    lo_v + frac * (hi_v - lo_v)
}

fn activation_step(spec: &QuantizerSpec, value: f32) -> StepSize {
    let s = StepSize::scalar(value.max(STEP_FLOOR));
    match spec.role() {
        Role::Weight => s,
        Role::Activation | Role::Cache => s.with_lr_multiplier(ACT_LR_MULTIPLIER),
    }
}

fn static_site(spec: &QuantizerSpec, what: &str) -> Result<()> {
    if spec.timing() != Timing::Static {
        return Err(SilqError::Usage(format!(
            "{what} calibration applies to static sites; dynamic sites compute scales at run time"
        )));
    }
    Ok(())
}

pub fn calibrate_percentile(
    samples: &CalibSample,
    spec: &QuantizerSpec,
    table: &PercentileTable,
    mode: PercentileMode,
) -> Result<StepSize> {
    static_site(spec, "percentile")?;
    let count = samples.scalar_count();
    if count < MIN_PERCENTILE_SAMPLES {
        return Err(SilqError::Input(format!(
            "percentile calibration needs at least {MIN_PERCENTILE_SAMPLES} values, got {count}"
        )));
    }
    let pct = table.lookup(spec.bits())?;
    let mut mags = samples.magnitudes();
    let q = quantile(&mut mags, pct);
    let s = match mode {
        PercentileMode::ClipRange => q / f64::from(spec.upper()),
        PercentileMode::RawValue => q,
    };
    Ok(activation_step(spec, s as f32))
}

pub fn calibrate_max(samples: &CalibSample, spec: &QuantizerSpec) -> Result<StepSize> {
    static_site(spec, "max")?;
    if samples.scalar_count() == 0 {
        return Err(SilqError::Input("max calibration over an empty sample set".into()));
    }
    let max = samples.tensors.iter().map(Tensor::max_abs).fold(0.0f32, f32::max);
    Ok(activation_step(spec, max / spec.upper() as f32))
}

/// `b = 2^(p-1) - 0.5`
pub fn mse_bound(bits: u8) -> f64 {
    f64::from(1u32 << (bits - 1)) - 0.5
}

/// Convex proxy for the squared quantization error of `w` at step `s`.
pub fn approx_mse(w: &[f32], s: f64, bits: u8) -> f64 {
    let b = mse_bound(bits);
    let bin = s * s / 12.0;
    w.iter()
        .map(|&v| {
            let over = f64::from(v).abs() - s * b;
            if over > 0.0 {
                bin.max(over * over)
            } else {
                bin
            }
        })
        .sum()
}

/// Golden-section minimizer of a unimodal `f` on `[lo, hi]`, stopping once the
/// bracket is narrower than `rel_tol` times its midpoint.
pub fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, rel_tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > rel_tol * 0.5 * (hi + lo) {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Step size minimizing [`approx_mse`] for one group of weights.
pub fn mse_step(w: &[f32], bits: u8) -> f32 {
    let max = w.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let upper = f64::from(max) / mse_bound(bits);
    let floor = f64::from(STEP_FLOOR);
    if upper <= floor {
        return STEP_FLOOR;
    }
    let s = golden_section(|s| approx_mse(w, s, bits), floor, upper, GOLDEN_TOLERANCE);
    (s as f32).max(STEP_FLOOR)
}

fn weight_groups(w: &Tensor, spec: &QuantizerSpec) -> Result<Vec<Vec<f32>>> {
    if w.is_empty() {
        return Err(SilqError::Input("weight calibration over an empty tensor".into()));
    }
    let map = spec.group_map(w.shape())?;
    let groups = spec.groups(w.shape())?;
    let mut out = vec![Vec::with_capacity(w.len() / groups); groups];
    for (i, &v) in w.data().iter().enumerate() {
        out[map.group(i)].push(v);
    }
    Ok(out)
}

/// Convex-MSE calibration, one step per scale group of `spec`.
pub fn calibrate_weight_mse(w: &Tensor, spec: &QuantizerSpec) -> Result<StepSize> {
    let groups = weight_groups(w, spec)?;
    Ok(StepSize::new(groups.iter().map(|g| mse_step(g, spec.bits())).collect()))
}

/// LSQ initializer `2·mean|w| / sqrt(b_u)` per scale group.
pub fn calibrate_lsq_init(w: &Tensor, spec: &QuantizerSpec) -> Result<StepSize> {
    let groups = weight_groups(w, spec)?;
    let root = f64::from(spec.upper()).sqrt();
    Ok(StepSize::new(
        groups
            .iter()
            .map(|g| {
                let mean = g.iter().map(|v| f64::from(v.abs())).sum::<f64>() / g.len() as f64;
                ((2.0 * mean / root) as f32).max(STEP_FLOOR)
            })
            .collect(),
    ))
}

pub fn calibrate_weight(w: &Tensor, spec: &QuantizerSpec, method: WeightCalib) -> Result<StepSize> {
    match method {
        WeightCalib::Mse => calibrate_weight_mse(w, spec),
        WeightCalib::Lsq => calibrate_lsq_init(w, spec),
    }
}

pub fn calibrate_activation(
    samples: &CalibSample,
    spec: &QuantizerSpec,
    method: ActCalib,
    table: &PercentileTable,
    mode: PercentileMode,
) -> Result<StepSize> {
    match method {
        ActCalib::Percentile => calibrate_percentile(samples, spec, table, mode),
        ActCalib::Max => calibrate_max(samples, spec),
    }
}
