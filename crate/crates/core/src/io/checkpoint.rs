//! Directory artifacts: `manifest.json` indexing raw little-endian payloads
//! in `tensors.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SilqError};
use crate::model::{Model, ModelConfig, PrecisionPlan};
use crate::params::{ParamKind, ParamStore};
use crate::quant::{pack_int4, unpack_int4};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DType {
    F32,
    I8,
    I4Packed,
}

impl DType {
    /// Bytes used by `count` elements.
    pub fn byte_len(self, count: usize) -> usize {
        match self {
            DType::F32 => 4 * count,
            DType::I8 => count,
            DType::I4Packed => count.div_ceil(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactKind {
    /// Floating-point weights plus step sizes, loadable for training.
    Checkpoint,
    /// Integer weight codes with their scales.
    Export,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
    /// Tensor holding the per-channel scales of integer codes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<String>,
    pub kind: ParamKind,
    pub lr_multiplier: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub artifact: ArtifactKind,
    pub seed: u64,
    pub model: ModelConfig,
    pub plan: PrecisionPlan,
    pub tensors: Vec<TensorEntry>,
}

/// In-memory tensor payload.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    I8(Vec<i8>),
    /// Unpacked 4-bit codes in `[-8, 7]`.
    I4(Vec<i8>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::I8(_) => DType::I8,
            Payload::I4(_) => DType::I4Packed,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::I8(v) | Payload::I4(v) => v.len(),
        }
    }

    fn encode(&self, out: &mut Vec<u8>) -> Result<()> {
        match self {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
            Payload::I4(v) => out.extend(pack_int4(v)?),
        }
        Ok(())
    }

    fn decode(dtype: DType, bytes: &[u8], count: usize) -> Result<Payload> {
        Ok(match dtype {
            DType::F32 => Payload::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::I8 => Payload::I8(bytes.iter().map(|&b| b as i8).collect()),
            DType::I4Packed => Payload::I4(unpack_int4(bytes, count)?),
        })
    }

    /// Float values; integer codes come back unscaled.
    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            Payload::F32(v) => v.clone(),
            Payload::I8(v) | Payload::I4(v) => v.iter().map(|&c| f32::from(c)).collect(),
        }
    }
}

/// One named tensor to write.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
    pub scale: Option<String>,
    pub kind: ParamKind,
    pub lr_multiplier: f32,
}

/// Artifact header without the tensor table.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub artifact: ArtifactKind,
    pub seed: u64,
    pub model: ModelConfig,
    pub plan: PrecisionPlan,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(|e| SilqError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| SilqError::io(path, e))
}

fn format_err(path: &Path, detail: impl Into<String>) -> SilqError {
    SilqError::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Writes `records` under `dir`, payload first and manifest last, each via a
/// temporary file and rename.
pub fn write_artifact(dir: &Path, header: &Header, records: &[Record]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| SilqError::io(dir, e))?;
    let mut bytes = Vec::new();
    let mut tensors = Vec::with_capacity(records.len());
    for r in records {
        let count: usize = r.shape.iter().product();
        if r.payload.len() != count {
            return Err(SilqError::dim(
                "write_artifact",
                format!("`{}` has {} values for shape {:?}", r.name, r.payload.len(), r.shape),
            ));
        }
        let offset = bytes.len();
        r.payload.encode(&mut bytes)?;
        tensors.push(TensorEntry {
            name: r.name.clone(),
            dtype: r.payload.dtype(),
            shape: r.shape.clone(),
            offset,
            length: bytes.len() - offset,
            scale: r.scale.clone(),
            kind: r.kind,
            lr_multiplier: r.lr_multiplier,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        artifact: header.artifact,
        seed: header.seed,
        model: header.model.clone(),
        plan: header.plan.clone(),
        tensors,
    };
    validate_manifest(&manifest, bytes.len(), &dir.join(MANIFEST_FILE))?;
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    write_atomic(&dir.join(PAYLOAD_FILE), &bytes)?;
    write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

fn validate_manifest(m: &Manifest, payload_len: usize, path: &Path) -> Result<()> {
    if m.format_version != FORMAT_VERSION {
        return Err(format_err(
            path,
            format!("unsupported format version {}", m.format_version),
        ));
    }
    let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(m.tensors.len());
    for t in &m.tensors {
        let count: usize = t.shape.iter().product();
        if t.dtype.byte_len(count) != t.length {
            return Err(format_err(
                path,
                format!("`{}`: length {} for {count} elements", t.name, t.length),
            ));
        }
        if t.offset + t.length > payload_len {
            return Err(format_err(path, format!("`{}` runs past the payload", t.name)));
        }
        if t.dtype != DType::F32 {
            let scale = t
                .scale
                .as_deref()
                .ok_or_else(|| format_err(path, format!("integer tensor `{}` names no scale", t.name)))?;
            let target = m.tensors.iter().find(|s| s.name == scale);
            if !target.is_some_and(|s| s.dtype == DType::F32) {
                return Err(format_err(path, format!("scale `{scale}` of `{}` is missing", t.name)));
            }
        }
        spans.push((t.offset, t.length, &t.name));
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[0].0 + w[0].1 > w[1].0 {
            return Err(format_err(path, format!("`{}` overlaps `{}`", w[0].2, w[1].2)));
        }
    }
    let mut names: Vec<&str> = m.tensors.iter().map(|t| t.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(format_err(path, "duplicate tensor names"));
    }
    Ok(())
}

/// Reads and validates an artifact directory.
pub fn read_artifact(dir: &Path) -> Result<(Manifest, Vec<Payload>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| SilqError::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| format_err(&manifest_path, e.to_string()))?;
    let payload_path = dir.join(PAYLOAD_FILE);
    let bytes = fs::read(&payload_path).map_err(|e| SilqError::io(&payload_path, e))?;
    validate_manifest(&manifest, bytes.len(), &manifest_path)?;
    let payloads = manifest
        .tensors
        .iter()
        .map(|t| {
            let count = t.shape.iter().product();
            Payload::decode(t.dtype, &bytes[t.offset..t.offset + t.length], count)
        })
        .collect::<Result<_>>()?;
    Ok((manifest, payloads))
}

/// A model with the seed it was produced under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(model: Model, seed: u64) -> Self {
        Checkpoint { model, seed }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let records: Vec<Record> = self
            .model
            .params
            .iter()
            .map(|p| Record {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                payload: Payload::F32(p.tensor.data().to_vec()),
                scale: None,
                kind: p.kind,
                lr_multiplier: p.lr_multiplier,
            })
            .collect();
        let header = Header {
            artifact: ArtifactKind::Checkpoint,
            seed: self.seed,
            model: self.model.config.clone(),
            plan: self.model.plan.clone(),
        };
        write_artifact(dir, &header, &records)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, payloads) = read_artifact(dir)?;
        if manifest.artifact != ArtifactKind::Checkpoint {
            return Err(format_err(
                &dir.join(MANIFEST_FILE),
                "expected a training checkpoint, found an export artifact",
            ));
        }
        let mut params = ParamStore::new();
        for (t, p) in manifest.tensors.iter().zip(payloads) {
            let tensor = Tensor::new(t.shape.clone(), p.to_f32())?;
            params.insert_with_lr(t.name.clone(), tensor, t.kind, t.lr_multiplier);
        }
        let model = Model::from_params(manifest.model, manifest.plan, &params)?;
        Ok(Checkpoint {
            model,
            seed: manifest.seed,
        })
    }
}

/// Both files of an artifact directory.
pub fn artifact_files(dir: &Path) -> [PathBuf; 2] {
    [dir.join(MANIFEST_FILE), dir.join(PAYLOAD_FILE)]
}
