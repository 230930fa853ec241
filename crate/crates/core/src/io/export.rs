//! Integer export: weight codes plus scales, reloaded through an
//! integer-dequant forward and compared with the fake-quant model.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{
    read_artifact, write_artifact, ArtifactKind, Header, Payload, Record, MANIFEST_FILE, PAYLOAD_FILE,
};
use crate::error::{Result, SilqError};
use crate::model::{Model, PrecisionPlan, Site, SiteSetting};
use crate::params::{ParamKind, ParamStore};
use crate::quant::{self, Role};
use crate::tensor::Tensor;

/// Largest max-abs logit difference accepted between the two forward paths.
pub const PARITY_TOLERANCE: f32 = 1e-5;
/// Prompts used by [`export_verified`].
pub const PARITY_PROMPTS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub path: PathBuf,
    pub payload_bytes: u64,
    pub manifest_bytes: u64,
    /// Payload size predicted from tensor counts and bit widths.
    pub analytic_payload_bytes: u64,
    pub max_logit_diff: f32,
    pub quantized_tensors: usize,
}

/// Integer records for `model`: weights with a quantizer of at most 8 bits
/// become codes (4-bit packed when `bits <= 4`), everything else stays f32.
pub fn export_records(model: &Model) -> Result<Vec<Record>> {
    let mut records = Vec::with_capacity(model.params.len());
    for p in model.params.iter() {
        let quantizer = model
            .quantizer(&p.name)
            .filter(|q| q.spec.role() == Role::Weight && q.spec.bits() <= 8);
        let (payload, scale) = match quantizer {
            Some(q) => {
                let step = model.step_size(&q.key).expect("weight quantizers are static");
                let codes: Vec<i8> = quant::quantize_codes(&p.tensor, &step, &q.spec)?
                    .into_iter()
                    .map(|c| c as i8)
                    .collect();
                let payload = if q.spec.bits() <= 4 {
                    Payload::I4(codes)
                } else {
                    Payload::I8(codes)
                };
                (payload, Some(q.step_name()))
            }
            None => {
                let values = match model.quantizer(&p.name) {
                    Some(q) => {
                        let step = model.step_size(&q.key).expect("weight quantizers are static");
                        quant::quantize_fake(&p.tensor, &step, &q.spec)?.into_data()
                    }
                    None => p.tensor.data().to_vec(),
                };
                (Payload::F32(values), None)
            }
        };
        records.push(Record {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            payload,
            scale,
            kind: p.kind,
            lr_multiplier: p.lr_multiplier,
        });
    }
    Ok(records)
}

/// Writes the integer artifact for `model` into `dir`.
pub fn write_export(model: &Model, dir: &Path, seed: u64) -> Result<Vec<Record>> {
    let records = export_records(model)?;
    let header = Header {
        artifact: ArtifactKind::Export,
        seed,
        model: model.config.clone(),
        plan: model.plan.clone(),
    };
    write_artifact(dir, &header, &records)?;
    Ok(records)
}

/// Plan of the reloaded model: weight sites are off because the weights are
/// already dequantized.
fn dequant_plan(plan: &PrecisionPlan) -> Result<PrecisionPlan> {
    let mut out = plan.clone();
    for site in Site::ALL {
        if site.role() == Some(Role::Weight) {
            out = out.with_site(site, SiteSetting::Off)?;
        }
    }
    Ok(out)
}

/// Loads an export artifact as a model whose weights are `code · scale` and
/// whose activation quantizers match the exported plan.
pub fn load_export(dir: &Path) -> Result<Model> {
    let (manifest, payloads) = read_artifact(dir)?;
    if manifest.artifact != ArtifactKind::Export {
        return Err(SilqError::Format {
            path: dir.join(MANIFEST_FILE),
            detail: "expected an export artifact".into(),
        });
    }
    let by_name = |name: &str| {
        manifest
            .tensors
            .iter()
            .position(|t| t.name == name)
            .expect("validated scale reference")
    };
    let mut params = ParamStore::new();
    for (entry, payload) in manifest.tensors.iter().zip(&payloads) {
        if entry.kind == ParamKind::WeightStep {
            continue;
        }
        let values = match &entry.scale {
            None => payload.to_f32(),
            Some(scale_name) => {
                let scales = payloads[by_name(scale_name)].to_f32();
                let site = crate::model::weight_site_of_name(&entry.name)
                    .ok_or_else(|| SilqError::Input(format!("`{}` is not a quantizable weight", entry.name)))?;
                let spec = manifest
                    .plan
                    .spec(site)
                    .ok_or_else(|| SilqError::Input(format!("plan does not quantize `{}`", entry.name)))?;
                let map = spec.group_map(&entry.shape)?;
                if scales.len() != spec.groups(&entry.shape)? {
                    return Err(SilqError::dim("load_export", format!("scales of `{}`", entry.name)));
                }
                payload
                    .to_f32()
                    .into_iter()
                    .enumerate()
                    .map(|(i, code)| code * scales[map.group(i)])
                    .collect()
            }
        };
        let tensor = Tensor::new(entry.shape.clone(), values)?;
        params.insert_with_lr(entry.name.clone(), tensor, entry.kind, entry.lr_multiplier);
    }
    Model::from_params(manifest.model, dequant_plan(&manifest.plan)?, &params)
}

/// Random token prompts for the parity check.
pub fn parity_prompts(model: &Model, count: usize, seq_len: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = seq_len.clamp(1, model.config.max_seq_len);
    (0..count)
        .map(|_| (0..len).map(|_| rng.random_range(0..256)).collect())
        .collect()
}

/// Largest absolute logit difference between two models over `prompts`.
pub fn max_logit_diff(a: &Model, b: &Model, prompts: &[Vec<usize>]) -> Result<f32> {
    let mut worst = 0.0f32;
    for prompt in prompts {
        let batch = std::slice::from_ref(prompt);
        let diff = a.logits(batch)?.max_abs_diff(&b.logits(batch)?);
        if diff.is_nan() {
            return Ok(f32::INFINITY);
        }
        worst = worst.max(diff);
    }
    Ok(worst)
}

fn file_len(path: &Path) -> Result<u64> {
    Ok(fs::metadata(path).map_err(|e| SilqError::io(path, e))?.len())
}

/// Exports into a staging directory, reloads it, checks logit parity on
/// [`PARITY_PROMPTS`] random prompts and only then moves it to `dir`. A
/// failed check removes the staging directory and returns
/// [`SilqError::Equivalence`].
pub fn export_verified(model: &Model, dir: &Path, seed: u64, seq_len: usize) -> Result<ExportSummary> {
    let staging = dir.with_extension("partial");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| SilqError::io(&staging, e))?;
    }
    let records = write_export(model, &staging, seed)?;
    let check = (|| {
        let reloaded = load_export(&staging)?;
        let prompts = parity_prompts(model, PARITY_PROMPTS, seq_len, seed);
        max_logit_diff(model, &reloaded, &prompts)
    })();
    let max_diff = match check {
        Ok(d) if d <= PARITY_TOLERANCE => d,
        other => {
            let _ = fs::remove_dir_all(&staging);
            return Err(match other {
                Ok(d) => SilqError::Equivalence {
                    max_diff: d,
                    tolerance: PARITY_TOLERANCE,
                },
                Err(e) => e,
            });
        }
    };
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| SilqError::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| SilqError::io(dir, e))?;
    let analytic = records
        .iter()
        .map(|r| r.payload.dtype().byte_len(r.shape.iter().product()) as u64)
        .sum();
    Ok(ExportSummary {
        path: dir.to_path_buf(),
        payload_bytes: file_len(&dir.join(PAYLOAD_FILE))?,
        manifest_bytes: file_len(&dir.join(MANIFEST_FILE))?,
        analytic_payload_bytes: analytic,
        max_logit_diff: max_diff,
        quantized_tensors: records.iter().filter(|r| r.scale.is_some()).count(),
    })
}

/// Payload bytes predicted from the plan alone: `n/2` per 4-bit weight, `n`
/// per 8-bit weight, 4 bytes per float.
pub fn analytic_payload_bytes(model: &Model) -> u64 {
    model
        .params
        .iter()
        .map(|p| {
            let n = p.tensor.len() as u64;
            match model.quantizer(&p.name).map(|q| q.spec) {
                Some(spec) if spec.role() == Role::Weight && spec.bits() <= 4 => n.div_ceil(2),
                Some(spec) if spec.role() == Role::Weight && spec.bits() <= 8 => n,
                _ => 4 * n,
            }
        })
        .sum()
}
