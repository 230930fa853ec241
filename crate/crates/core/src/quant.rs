//! Symmetric uniform fake quantization.
//!
//! Forward: `x̂ = round(clamp(x / s, b_l, b_u)) · s`, ties to even, zero-point
//! always 0. Backward rules are the straight-through estimator for the data
//! and the LSQ rule for the step size.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SilqError};
use crate::tensor::Tensor;

/// Smallest step size ever produced by a calibrator or kept after an update.
pub const STEP_FLOOR: f32 = 1e-8;

/// Default LR multiplier for activation step sizes.
pub const ACT_LR_MULTIPLIER: f32 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Granularity {
    PerTensor,
    /// One scale per index along `axis` (rows of a `[out, in]` weight for axis 0).
    PerChannel {
        axis: usize,
    },
    /// One scale per row of a `[tokens, features]` activation.
    PerToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Timing {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Activation,
    Weight,
    Cache,
}

/// Bit width, granularity and timing of one quantization site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    bits: u8,
    granularity: Granularity,
    timing: Timing,
    role: Role,
}

impl QuantizerSpec {
    pub fn new(bits: u8, granularity: Granularity, timing: Timing, role: Role) -> Result<Self> {
        let spec = QuantizerSpec {
            bits,
            granularity,
            timing,
            role,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.bits, 2 | 4 | 8 | 16) {
            return Err(SilqError::Input(format!(
                "unsupported bit width {} (expected 2, 4, 8 or 16)",
                self.bits
            )));
        }
        match (self.granularity, self.role, self.timing) {
            (Granularity::PerChannel { .. }, role, _) if role != Role::Weight => {
                Err(SilqError::Input("per-channel granularity is only for weights".into()))
            }
            (Granularity::PerToken, Role::Weight, _) => Err(SilqError::Input(
                "per-token granularity is not valid for weights".into(),
            )),
            (Granularity::PerToken, _, Timing::Static) => {
                Err(SilqError::Input("per-token granularity requires dynamic timing".into()))
            }
            (_, Role::Weight, Timing::Dynamic) => {
                Err(SilqError::Input("weights cannot use dynamic quantization".into()))
            }
            _ => Ok(()),
        }
    }

    /// Per-output-channel weight quantizer for a `[out, in]` matrix.
    pub fn weight(bits: u8) -> Result<Self> {
        Self::new(bits, Granularity::PerChannel { axis: 0 }, Timing::Static, Role::Weight)
    }

    /// Per-tensor static or per-token dynamic activation quantizer.
    pub fn activation(bits: u8, timing: Timing) -> Result<Self> {
        Self::new(bits, Self::granularity_for(timing), timing, Role::Activation)
    }

    pub fn cache(bits: u8, timing: Timing) -> Result<Self> {
        Self::new(bits, Self::granularity_for(timing), timing, Role::Cache)
    }

    fn granularity_for(timing: Timing) -> Granularity {
        match timing {
            Timing::Static => Granularity::PerTensor,
            Timing::Dynamic => Granularity::PerToken,
        }
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn timing(&self) -> Timing {
        self.timing
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// `-2^(p-1)`
    pub fn lower(&self) -> i32 {
        -(1i32 << (self.bits - 1))
    }

    /// `2^(p-1) - 1`
    pub fn upper(&self) -> i32 {
        (1i32 << (self.bits - 1)) - 1
    }

    /// Number of independent scales needed for a tensor of `shape`.
    pub fn groups(&self, shape: &[usize]) -> Result<usize> {
        match self.granularity {
            Granularity::PerTensor => Ok(1),
            Granularity::PerToken => {
                let cols = *shape.last().ok_or_else(|| SilqError::dim("quantize", "scalar"))?;
                Ok(shape.iter().product::<usize>() / cols)
            }
            Granularity::PerChannel { axis } => shape
                .get(axis)
                .copied()
                .ok_or_else(|| SilqError::dim("quantize", format!("channel axis {axis} out of range for {shape:?}"))),
        }
    }

    /// Maps a flat element index to its scale group.
    pub(crate) fn group_map(&self, shape: &[usize]) -> Result<GroupMap> {
        let groups = self.groups(shape)?;
        Ok(match self.granularity {
            Granularity::PerTensor => GroupMap {
                stride: usize::MAX,
                groups,
            },
            Granularity::PerToken => GroupMap {
                stride: *shape.last().unwrap_or(&1),
                groups,
            },
            Granularity::PerChannel { axis } => GroupMap {
                stride: shape[axis + 1..].iter().product(),
                groups,
            },
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct GroupMap {
    stride: usize,
    groups: usize,
}

impl GroupMap {
    #[inline]
    pub(crate) fn group(&self, index: usize) -> usize {
        if self.groups == 1 {
            0
        } else {
            (index / self.stride) % self.groups
        }
    }
}

/// Positive quantizer scale(s), one per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSize {
    pub values: Vec<f32>,
    pub learnable: bool,
    pub lr_multiplier: f32,
}

impl StepSize {
    pub fn new(values: Vec<f32>) -> Self {
        StepSize {
            values,
            learnable: true,
            lr_multiplier: 1.0,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::new(vec![value])
    }

    pub fn fixed(values: Vec<f32>) -> Self {
        StepSize {
            values,
            learnable: false,
            lr_multiplier: 1.0,
        }
    }

    pub fn with_lr_multiplier(mut self, m: f32) -> Self {
        self.lr_multiplier = m;
        self
    }

    fn check(&self, spec: &QuantizerSpec, shape: &[usize]) -> Result<GroupMap> {
        if let Some(bad) = self.values.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(SilqError::Input(format!("step size must be positive, got {bad}")));
        }
        let map = spec.group_map(shape)?;
        if self.values.len() != map.groups {
            return Err(SilqError::dim(
                "quantize",
                format!(
                    "{} step sizes for {} groups of shape {shape:?}",
                    self.values.len(),
                    map.groups
                ),
            ));
        }
        Ok(map)
    }
}

#[inline]
fn quantize_scalar(x: f32, s: f32, lo: f32, hi: f32) -> f32 {
    (x / s).clamp(lo, hi).round_ties_even()
}

/// Integer codes `round(clamp(x / s, b_l, b_u))`.
pub fn quantize_codes(x: &Tensor, s: &StepSize, spec: &QuantizerSpec) -> Result<Vec<i32>> {
    let map = s.check(spec, x.shape())?;
    let (lo, hi) = (spec.lower() as f32, spec.upper() as f32);
    Ok(x.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| quantize_scalar(v, s.values[map.group(i)], lo, hi) as i32)
        .collect())
}

/// Quantize-then-dequantize.
pub fn quantize_fake(x: &Tensor, s: &StepSize, spec: &QuantizerSpec) -> Result<Tensor> {
    let map = s.check(spec, x.shape())?;
    let (lo, hi) = (spec.lower() as f32, spec.upper() as f32);
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let step = s.values[map.group(i)];
            quantize_scalar(v, step, lo, hi) * step
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Straight-through gradient: passes `g_out` where `b_l <= x/s <= b_u`.
pub fn backward_ste(x: &Tensor, s: &StepSize, spec: &QuantizerSpec, g_out: &Tensor) -> Result<Tensor> {
    if g_out.shape() != x.shape() {
        return Err(SilqError::dim("backward_ste", "gradient shape differs from input"));
    }
    let map = s.check(spec, x.shape())?;
    let (lo, hi) = (spec.lower() as f32, spec.upper() as f32);
    let data = x
        .data()
        .iter()
        .zip(g_out.data())
        .enumerate()
        .map(|(i, (&v, &g))| {
            let r = v / s.values[map.group(i)];
            if (lo..=hi).contains(&r) {
                g
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// LSQ step-size gradient, one entry per scale group.
///
/// Per element: `round(x/s) - x/s` inside the range, `b_l` below, `b_u` above,
/// weighted by `g_out` and summed per group. With `grad_scale`, each group's
/// sum is multiplied by `1 / sqrt(N_group · b_u)`.
pub fn backward_lsq_step(
    x: &Tensor,
    s: &StepSize,
    spec: &QuantizerSpec,
    g_out: &Tensor,
    grad_scale: bool,
) -> Result<Vec<f32>> {
    if g_out.shape() != x.shape() {
        return Err(SilqError::dim("backward_lsq_step", "gradient shape differs from input"));
    }
    let map = s.check(spec, x.shape())?;
    let (lo, hi) = (spec.lower() as f32, spec.upper() as f32);
    let mut sums = vec![0.0f64; map.groups];
    for (i, (&v, &g)) in x.data().iter().zip(g_out.data()).enumerate() {
        let k = map.group(i);
        let r = v / s.values[k];
        let local = if r < lo {
            f64::from(lo)
        } else if r > hi {
            f64::from(hi)
        } else {
            // the residual is taken in f64 so it keeps its relative accuracy
            // when the code is large and the residual small
            f64::from(r.round_ties_even()) - f64::from(v) / f64::from(s.values[k])
        };
        sums[k] += local * f64::from(g);
    }
    let per_group = (x.len() / map.groups) as f64;
    let scale = if grad_scale {
        1.0 / (per_group * f64::from(spec.upper())).sqrt()
    } else {
        1.0
    };
    Ok(sums.into_iter().map(|v| (v * scale) as f32).collect())
}

/// Max-abs scale per group for dynamic quantization, floored at [`STEP_FLOOR`].
pub fn compute_dynamic_scale(x: &Tensor, spec: &QuantizerSpec) -> Result<StepSize> {
    if spec.role() == Role::Weight || spec.timing() != Timing::Dynamic {
        return Err(SilqError::Input(
            "dynamic scales need an activation or cache site with dynamic timing".into(),
        ));
    }
    let map = spec.group_map(x.shape())?;
    let mut max_abs = vec![0.0f32; map.groups];
    for (i, &v) in x.data().iter().enumerate() {
        let k = map.group(i);
        max_abs[k] = max_abs[k].max(v.abs());
    }
    let bu = spec.upper() as f32;
    Ok(StepSize::fixed(
        max_abs
            .into_iter()
            .map(|m| if m > 0.0 { (m / bu).max(STEP_FLOOR) } else { STEP_FLOOR })
            .collect(),
    ))
}

/// Packs signed 4-bit values two per byte, low nibble first.
pub fn pack_int4(q: &[i8]) -> Result<Vec<u8>> {
    if let Some(bad) = q.iter().find(|v| !(-8..=7).contains(*v)) {
        return Err(SilqError::Input(format!("value {bad} does not fit in 4 bits")));
    }
    Ok(q.chunks(2)
        .map(|pair| {
            let lo = (pair[0] as u8) & 0x0f;
            let hi = pair.get(1).map_or(0, |&v| (v as u8) & 0x0f);
            lo | (hi << 4)
        })
        .collect())
}

pub fn unpack_int4(bytes: &[u8], count: usize) -> Result<Vec<i8>> {
    if bytes.len() != count.div_ceil(2) {
        return Err(SilqError::Input(format!(
            "{} bytes cannot hold exactly {count} packed nibbles",
            bytes.len()
        )));
    }
    let sign_extend = |n: u8| ((n << 4) as i8) >> 4;
    Ok((0..count)
        .map(|i| {
            let byte = bytes[i / 2];
            sign_extend(if i % 2 == 0 { byte & 0x0f } else { byte >> 4 })
        })
        .collect())
}
