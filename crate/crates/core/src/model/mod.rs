//! Tiny decoder-only transformer with fake-quantization sites.
//!
//! Per layer: `attn_norm → [attn_input_act] → q/k/v → rope → [query_out],
//! [key_cache], [value_cache] → causal attention → [o_input_act] → o` and
//! `mlp_norm → [mlp_input_act] → gate/up → silu·up → [down_input_act] → down`,
//! both residual. The head sees `final_norm → [head_input_act] → head`.
//! Bracketed names are activation sites; each projection weight has its own
//! per-output-channel quantizer when the plan enables its site.

mod config;
mod eval;
mod forward;
mod kv_cache;
mod plan;

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::ModelConfig;
pub use eval::{eval_perplexity, EvalReport, EVAL_BATCH};
pub use forward::ForwardOutput;
pub use kv_cache::KvCacheStore;
pub use plan::{PlanPreset, PrecisionPlan, Site, SiteSetting};

use crate::calib::{self, ActCalib, CalibSample, PercentileMode, PercentileTable, WeightCalib};
use crate::error::{Result, SilqError};
use crate::params::{ParamKind, ParamStore};
use crate::quant::{QuantizerSpec, Role, StepSize, Timing, ACT_LR_MULTIPLIER};
use crate::tensor::Tensor;

/// One quantizer instance bound to a plan site.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    /// Unique name, e.g. `layers.0.attn_input_act` or `layers.1.wq`.
    pub key: String,
    pub site: Site,
    pub layer: Option<usize>,
    pub spec: QuantizerSpec,
    /// Index of the step-size parameter; `None` for dynamic sites.
    pub step: Option<usize>,
}

impl Quantizer {
    pub fn step_name(&self) -> String {
        format!("{}.step", self.key)
    }
}

/// Shape and role of every base weight, in a fixed order.
pub fn weight_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
    let mut out = vec![("embed".to_string(), vec![v, d], ParamKind::Embedding)];
    for l in 0..config.n_layers {
        let p = |n: &str| format!("layers.{l}.{n}");
        out.push((p("attn_norm"), vec![d], ParamKind::Norm));
        for n in ["wq", "wk", "wv", "wo"] {
            out.push((p(n), vec![d, d], ParamKind::Weight));
        }
        out.push((p("mlp_norm"), vec![d], ParamKind::Norm));
        out.push((p("w_gate"), vec![f, d], ParamKind::Weight));
        out.push((p("w_up"), vec![f, d], ParamKind::Weight));
        out.push((p("w_down"), vec![d, f], ParamKind::Weight));
    }
    out.push(("final_norm".to_string(), vec![d], ParamKind::Norm));
    out.push(("head".to_string(), vec![v, d], ParamKind::Weight));
    out
}

/// Random base weights: N(0, 0.02) embedding and head, fan-in scaled
/// projections, unit norm gains.
pub fn init_weights(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let residual_scale = 1.0 / (2.0 * config.n_layers as f32).sqrt();
    let mut store = ParamStore::new();
    for (name, shape, kind) in weight_layout(config) {
        let t = match kind {
            ParamKind::Norm => Tensor::full(&shape, 1.0),
            ParamKind::Embedding => Tensor::randn(&shape, 0.02, &mut rng),
            _ if name == "head" => Tensor::randn(&shape, 0.02, &mut rng),
            _ => {
                let mut std = 1.0 / (shape[1] as f32).sqrt();
                if name.ends_with("wo") || name.ends_with("w_down") {
                    std *= residual_scale;
                }
                Tensor::randn(&shape, std, &mut rng)
            }
        };
        store.insert(name, t, kind);
    }
    Ok(store)
}

/// Weight sites and the per-layer weights they cover.
fn weight_site_of(short: &str) -> Option<Site> {
    match short {
        "wq" | "wk" | "wv" => Some(Site::QkvWeights),
        "wo" => Some(Site::OWeight),
        "w_gate" | "w_up" => Some(Site::GateUpWeights),
        "w_down" => Some(Site::DownWeight),
        _ => None,
    }
}

/// Weight site of a full parameter name such as `layers.0.wq` or `head`.
pub(crate) fn weight_site_of_name(name: &str) -> Option<Site> {
    if name == "head" {
        return Some(Site::HeadWeight);
    }
    let short = name.strip_prefix("layers.")?.split_once('.')?.1;
    weight_site_of(short)
}

const LAYER_ACT_SITES: [(Site, &str); 8] = [
    (Site::AttnInputAct, "attn_input_act"),
    (Site::QueryOut, "query_out"),
    (Site::KeyCache, "key_cache"),
    (Site::ValueCache, "value_cache"),
    (Site::AttnProbs, "attn_probs"),
    (Site::OInputAct, "o_input_act"),
    (Site::MlpInputAct, "mlp_input_act"),
    (Site::DownInputAct, "down_input_act"),
];

/// Transformer weights plus one quantizer per enabled plan site.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub plan: PrecisionPlan,
    pub params: ParamStore,
    quantizers: Vec<Quantizer>,
    quant_index: HashMap<String, usize>,
    /// Apply the `1/sqrt(N·b_u)` LSQ gradient scale.
    pub lsq_grad_scale: bool,
}

impl Model {
    /// Unquantized model over `weights`.
    pub fn full_precision(config: ModelConfig, weights: ParamStore) -> Result<Self> {
        Self::assemble(config, PrecisionPlan::full_precision(), weights)
    }

    /// Model whose weights and step sizes all come from `params`, as stored
    /// in a checkpoint.
    pub fn from_params(config: ModelConfig, plan: PrecisionPlan, params: &ParamStore) -> Result<Self> {
        let mut model = Self::assemble(config, plan, params.clone())?;
        let steps: Vec<(String, usize)> = model
            .quantizers
            .iter()
            .filter_map(|q| q.step.map(|i| (q.step_name(), i)))
            .collect();
        for (name, i) in steps {
            let src = params
                .get(&name)
                .ok_or_else(|| SilqError::Input(format!("missing step size `{name}`")))?;
            let dst = model.params.at_mut(i);
            if src.tensor.shape() != dst.tensor.shape() || src.kind != dst.kind {
                return Err(SilqError::Input(format!("step size `{name}` does not match the plan")));
            }
            dst.tensor = src.tensor.clone();
            dst.lr_multiplier = src.lr_multiplier;
        }
        if model.params.len() != params.len() {
            return Err(SilqError::Input(format!(
                "{} stored tensors, plan expects {}",
                params.len(),
                model.params.len()
            )));
        }
        Ok(model)
    }

    fn assemble(config: ModelConfig, plan: PrecisionPlan, weights: ParamStore) -> Result<Self> {
        config.validate()?;
        plan.validate()?;
        let layout = weight_layout(&config);
        let mut params = ParamStore::new();
        for (name, shape, kind) in &layout {
            let t = weights.tensor(name)?;
            if t.shape() != shape.as_slice() {
                return Err(SilqError::Input(format!(
                    "weight `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            params.insert(name.clone(), t.clone(), *kind);
        }
        let mut model = Model {
            config,
            plan,
            params,
            quantizers: Vec::new(),
            quant_index: HashMap::new(),
            lsq_grad_scale: true,
        };
        model.create_quantizers()?;
        Ok(model)
    }

    fn create_quantizers(&mut self) -> Result<()> {
        let mut specs: Vec<(String, Site, Option<usize>, QuantizerSpec)> = Vec::new();
        for l in 0..self.config.n_layers {
            for (site, short) in LAYER_ACT_SITES {
                if let Some(spec) = self.plan.spec(site) {
                    specs.push((format!("layers.{l}.{short}"), site, Some(l), spec));
                }
            }
            for short in ["wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"] {
                let site = weight_site_of(short).expect("weight short name");
                if let Some(spec) = self.plan.spec(site) {
                    specs.push((format!("layers.{l}.{short}"), site, Some(l), spec));
                }
            }
        }
        if let Some(spec) = self.plan.spec(Site::HeadInputAct) {
            specs.push(("head_input_act".into(), Site::HeadInputAct, None, spec));
        }
        if let Some(spec) = self.plan.spec(Site::HeadWeight) {
            specs.push(("head".into(), Site::HeadWeight, None, spec));
        }
        for (key, site, layer, spec) in specs {
            let step = match (spec.role(), spec.timing()) {
                (_, Timing::Dynamic) => None,
                (Role::Weight, _) => {
                    let groups = spec.groups(self.params.tensor(&key)?.shape())?;
                    Some(self.params.insert(
                        format!("{key}.step"),
                        Tensor::full(&[groups], 1.0),
                        ParamKind::WeightStep,
                    ))
                }
                _ => Some(self.params.insert_with_lr(
                    format!("{key}.step"),
                    Tensor::scalar(1.0),
                    ParamKind::ActStep,
                    ACT_LR_MULTIPLIER,
                )),
            };
            self.quant_index.insert(key.clone(), self.quantizers.len());
            self.quantizers.push(Quantizer {
                key,
                site,
                layer,
                spec,
                step,
            });
        }
        Ok(())
    }

    pub fn quantizers(&self) -> &[Quantizer] {
        &self.quantizers
    }

    pub fn quantizer(&self, key: &str) -> Option<&Quantizer> {
        self.quant_index.get(key).map(|&i| &self.quantizers[i])
    }

    /// Current step size of a static quantizer.
    pub fn step_size(&self, key: &str) -> Option<StepSize> {
        let q = self.quantizer(key)?;
        let p = self.params.at(q.step?);
        Some(StepSize {
            values: p.tensor.data().to_vec(),
            learnable: true,
            lr_multiplier: p.lr_multiplier,
        })
    }

    pub fn set_step_size(&mut self, key: &str, step: &StepSize) -> Result<()> {
        let q = self
            .quantizer(key)
            .ok_or_else(|| SilqError::Input(format!("no quantizer `{key}`")))?;
        let idx = q
            .step
            .ok_or_else(|| SilqError::Input(format!("quantizer `{key}` has no static step")))?;
        let p = self.params.at_mut(idx);
        if p.tensor.len() != step.values.len() {
            return Err(SilqError::dim(
                "set_step_size",
                format!("{key}: {} values", step.values.len()),
            ));
        }
        p.tensor.data_mut().copy_from_slice(&step.values);
        p.lr_multiplier = step.lr_multiplier;
        Ok(())
    }

    /// Re-initializes every weight quantizer's step from the current weights.
    pub fn calibrate_weights(&mut self, method: WeightCalib) -> Result<()> {
        let keys: Vec<(String, QuantizerSpec)> = self
            .quantizers
            .iter()
            .filter(|q| q.spec.role() == Role::Weight)
            .map(|q| (q.key.clone(), q.spec))
            .collect();
        for (key, spec) in keys {
            let step = calib::calibrate_weight(self.params.tensor(&key)?, &spec, method)?;
            self.set_step_size(&key, &step)?;
        }
        Ok(())
    }

    /// Initializes static activation and cache steps from collected samples.
    pub fn calibrate_activations(
        &mut self,
        batches: &[Vec<Vec<usize>>],
        method: ActCalib,
        table: &PercentileTable,
        mode: PercentileMode,
    ) -> Result<BTreeMap<String, CalibSample>> {
        let mut samples: BTreeMap<String, CalibSample> = BTreeMap::new();
        for batch in batches {
            for (key, tensors) in self.collect_activations(batch)? {
                let entry = samples.entry(key).or_default();
                tensors.into_iter().for_each(|t| entry.push(t));
                entry.batches += 1;
                entry.samples += batch.len();
            }
        }
        for (key, sample) in &samples {
            let spec = self.quantizer(key).expect("collected from a known site").spec;
            let step = calib::calibrate_activation(sample, &spec, method, table, mode)?;
            self.set_step_size(key, &step)?;
        }
        Ok(samples)
    }

    pub fn all_steps_positive(&self) -> bool {
        self.params
            .iter()
            .filter(|p| p.kind.is_step())
            .all(|p| p.tensor.data().iter().all(|&v| v > 0.0))
    }

    /// Copy of the base weights (no step sizes).
    pub fn base_weights(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for p in self.params.iter().filter(|p| !p.kind.is_step()) {
            out.insert(p.name.clone(), p.tensor.clone(), p.kind);
        }
        out
    }

    pub fn new_cache(&self) -> Result<KvCacheStore> {
        KvCacheStore::for_model(self)
    }
}

/// Builds a quantized student: one quantizer per enabled plan site, weight
/// steps calibrated from `base_weights`, activation steps at placeholder 1.0
/// until [`Model::calibrate_activations`] runs.
pub fn build_quantized_model(
    config: ModelConfig,
    plan: PrecisionPlan,
    base_weights: &ParamStore,
    weight_calib: WeightCalib,
) -> Result<Model> {
    let mut model = Model::assemble(config, plan, base_weights.clone())?;
    model.calibrate_weights(weight_calib)?;
    Ok(model)
}
