use crate::error::{Result, SilqError};
use crate::quant::{self, QuantizerSpec, StepSize, Timing};
use crate::tensor::Tensor;

use super::Model;

/// Quantization applied to one cache lane.
#[derive(Debug, Clone, PartialEq)]
enum LaneQuant {
    Off,
    Static(QuantizerSpec, f32),
    Dynamic(QuantizerSpec),
}

/// Keys or values of one layer. Quantized lanes keep integer codes plus one
/// scale per row; unquantized lanes keep raw floats.
#[derive(Debug, Clone, PartialEq)]
struct Lane {
    quant: LaneQuant,
    codes: Vec<i32>,
    scales: Vec<f32>,
    raw: Vec<f32>,
}

impl Lane {
    fn new(quant: LaneQuant) -> Self {
        Lane {
            quant,
            codes: Vec::new(),
            scales: Vec::new(),
            raw: Vec::new(),
        }
    }

    fn write(&mut self, x: &Tensor) -> Result<()> {
        match &self.quant {
            LaneQuant::Off => self.raw.extend_from_slice(x.data()),
            LaneQuant::Static(spec, s) => {
                let codes = quant::quantize_codes(x, &StepSize::fixed(vec![*s]), spec)?;
                self.codes.extend(codes);
                self.scales.extend(std::iter::repeat_n(*s, x.rows()));
            }
            LaneQuant::Dynamic(spec) => {
                let steps = quant::compute_dynamic_scale(x, spec)?;
                self.codes.extend(quant::quantize_codes(x, &steps, spec)?);
                self.scales.extend(steps.values);
            }
        }
        Ok(())
    }

    fn read(&self, rows: usize, width: usize) -> Result<Tensor> {
        let data = match self.quant {
            LaneQuant::Off => self.raw.clone(),
            _ => self
                .codes
                .chunks(width)
                .zip(&self.scales)
                .flat_map(|(row, &s)| row.iter().map(move |&c| c as f32 * s))
                .collect(),
        };
        Tensor::new(vec![rows, width], data)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerCache {
    keys: Lane,
    values: Lane,
    len: usize,
}

/// Per-layer key/value storage for incremental decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCacheStore {
    layers: Vec<LayerCache>,
    width: usize,
    max_seq_len: usize,
}

fn lane_for(model: &Model, key: &str) -> Result<LaneQuant> {
    let Some(q) = model.quantizer(key) else {
        return Ok(LaneQuant::Off);
    };
    Ok(match q.spec.timing() {
        Timing::Dynamic => LaneQuant::Dynamic(q.spec),
        Timing::Static => {
            let s = model.step_size(key).expect("static site has a step").values[0];
            LaneQuant::Static(q.spec, s)
        }
    })
}

impl KvCacheStore {
    /// Empty cache using `model`'s cache-site quantizers and current steps.
    pub fn for_model(model: &Model) -> Result<Self> {
        let layers = (0..model.config.n_layers)
            .map(|l| {
                Ok(LayerCache {
                    keys: Lane::new(lane_for(model, &format!("layers.{l}.key_cache"))?),
                    values: Lane::new(lane_for(model, &format!("layers.{l}.value_cache"))?),
                    len: 0,
                })
            })
            .collect::<Result<_>>()?;
        Ok(KvCacheStore {
            layers,
            width: model.config.d_model,
            max_seq_len: model.config.max_seq_len,
        })
    }

    /// Standalone cache with one static-scale quantizer for every lane.
    pub fn with_static_scale(
        n_layers: usize,
        width: usize,
        max_seq_len: usize,
        spec: QuantizerSpec,
        step: f32,
    ) -> Result<Self> {
        if spec.timing() != Timing::Static || !(step > 0.0) {
            return Err(SilqError::Input(
                "static cache needs a static spec and positive step".into(),
            ));
        }
        let lane = || Lane::new(LaneQuant::Static(spec, step));
        Ok(KvCacheStore {
            layers: (0..n_layers)
                .map(|_| LayerCache {
                    keys: lane(),
                    values: lane(),
                    len: 0,
                })
                .collect(),
            width,
            max_seq_len,
        })
    }

    /// Positions held by layer 0 (all layers agree after a full forward).
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer_len(&self, layer: usize) -> usize {
        self.layers[layer].len
    }

    /// Appends `k` and `v` (`[t, width]`) to `layer`.
    pub fn kv_write(&mut self, layer: usize, k: &Tensor, v: &Tensor) -> Result<()> {
        let (width, max) = (self.width, self.max_seq_len);
        let cache = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| SilqError::Input(format!("no cache layer {layer}")))?;
        if k.shape() != v.shape() || k.ndim() != 2 || k.cols() != width {
            return Err(SilqError::dim(
                "kv_write",
                format!("keys {:?}, values {:?}, width {width}", k.shape(), v.shape()),
            ));
        }
        let t = k.rows();
        if cache.len + t > max {
            return Err(SilqError::Capacity {
                layer,
                len: cache.len,
                max,
                write: t,
            });
        }
        cache.keys.write(k)?;
        cache.values.write(v)?;
        cache.len += t;
        Ok(())
    }

    /// Dequantized keys and values stored for `layer`.
    pub fn kv_read(&self, layer: usize) -> Result<(Tensor, Tensor)> {
        let cache = self
            .layers
            .get(layer)
            .ok_or_else(|| SilqError::Input(format!("no cache layer {layer}")))?;
        if cache.len == 0 {
            return Err(SilqError::Usage(format!("cache layer {layer} read before any write")));
        }
        Ok((
            cache.keys.read(cache.len, self.width)?,
            cache.values.read(cache.len, self.width)?,
        ))
    }

    /// Stored integer codes for keys and values (empty for unquantized lanes).
    pub fn codes(&self, layer: usize) -> (&[i32], &[i32]) {
        let c = &self.layers[layer];
        (&c.keys.codes, &c.values.codes)
    }
}
