//! Per-site quantizer assignments for a transformer block.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SilqError};
use crate::quant::{Granularity, QuantizerSpec, Role, Timing};

/// Named quantization sites of the decoder block and output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// Normalized input shared by the q, k and v projections.
    AttnInputAct,
    QkvWeights,
    QueryOut,
    KeyCache,
    ValueCache,
    AttnProbs,
    OInputAct,
    OWeight,
    /// Normalized input shared by the gate and up projections.
    MlpInputAct,
    GateUpWeights,
    DownInputAct,
    DownWeight,
    HeadInputAct,
    HeadWeight,
    Embedding,
}

impl Site {
    pub const ALL: [Site; 15] = [
        Site::AttnInputAct,
        Site::QkvWeights,
        Site::QueryOut,
        Site::KeyCache,
        Site::ValueCache,
        Site::AttnProbs,
        Site::OInputAct,
        Site::OWeight,
        Site::MlpInputAct,
        Site::GateUpWeights,
        Site::DownInputAct,
        Site::DownWeight,
        Site::HeadInputAct,
        Site::HeadWeight,
        Site::Embedding,
    ];

    /// Role a quantizer at this site must carry; `None` for the embedding.
    pub fn role(self) -> Option<Role> {
        use Site::*;
        match self {
            QkvWeights | OWeight | GateUpWeights | DownWeight | HeadWeight => Some(Role::Weight),
            KeyCache | ValueCache => Some(Role::Cache),
            AttnInputAct | QueryOut | AttnProbs | OInputAct | MlpInputAct | DownInputAct | HeadInputAct => {
                Some(Role::Activation)
            }
            Embedding => None,
        }
    }

    pub fn name(self) -> &'static str {
        use Site::*;
        match self {
            AttnInputAct => "attn_input_act",
            QkvWeights => "qkv_weights",
            QueryOut => "query_out",
            KeyCache => "key_cache",
            ValueCache => "value_cache",
            AttnProbs => "attn_probs",
            OInputAct => "o_input_act",
            OWeight => "o_weight",
            MlpInputAct => "mlp_input_act",
            GateUpWeights => "gate_up_weights",
            DownInputAct => "down_input_act",
            DownWeight => "down_weight",
            HeadInputAct => "head_input_act",
            HeadWeight => "head_weight",
            Embedding => "embedding",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SiteSetting {
    Off,
    Quantize(QuantizerSpec),
}

impl SiteSetting {
    pub fn spec(&self) -> Option<&QuantizerSpec> {
        match self {
            SiteSetting::Off => None,
            SiteSetting::Quantize(s) => Some(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionPlan {
    sites: BTreeMap<Site, SiteSetting>,
}

impl PrecisionPlan {
    /// Builds a plan that must name every site exactly once.
    pub fn from_entries(entries: impl IntoIterator<Item = (Site, SiteSetting)>) -> Result<Self> {
        let mut sites = BTreeMap::new();
        for (site, setting) in entries {
            if sites.insert(site, setting).is_some() {
                return Err(SilqError::Plan(format!("site `{site}` named more than once")));
            }
        }
        let plan = PrecisionPlan { sites };
        plan.validate()?;
        Ok(plan)
    }

    /// Structural checks: completeness, roles and granularity per site.
    pub fn validate(&self) -> Result<()> {
        for site in Site::ALL {
            let setting = self
                .sites
                .get(&site)
                .ok_or_else(|| SilqError::Plan(format!("site `{site}` is missing")))?;
            let Some(spec) = setting.spec() else { continue };
            spec.validate()
                .map_err(|e| SilqError::Plan(format!("site `{site}`: {e}")))?;
            match site.role() {
                None => {
                    return Err(SilqError::Plan("the embedding has no quantizer".into()));
                }
                Some(role) if role != spec.role() => {
                    return Err(SilqError::Plan(format!(
                        "site `{site}` needs role {role:?}, got {:?}",
                        spec.role()
                    )));
                }
                Some(Role::Weight) if spec.granularity() != (Granularity::PerChannel { axis: 0 }) => {
                    return Err(SilqError::Plan(format!(
                        "weight site `{site}` must be per output channel"
                    )));
                }
                Some(_)
                    if spec.role() != Role::Weight
                        && spec.timing() == Timing::Static
                        && spec.granularity() != Granularity::PerTensor =>
                {
                    return Err(SilqError::Plan(format!("static site `{site}` must be per tensor")));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Bit-width rules of the deployment target: 8-bit activations, 16-bit
    /// query and attention probabilities, 4/8-bit cache, 4-bit weights and an
    /// 8-bit output head.
    pub fn validate_deployment(&self) -> Result<()> {
        use Site::*;
        self.validate()?;
        for (&site, setting) in &self.sites {
            let bits = setting.spec().map(|s| s.bits());
            let ok = match site {
                Embedding => bits.is_none(),
                AttnProbs => matches!(bits, None | Some(16)),
                QueryOut => bits == Some(16),
                KeyCache | ValueCache => matches!(bits, Some(4 | 8)),
                AttnInputAct | OInputAct | MlpInputAct | DownInputAct | HeadInputAct => bits == Some(8),
                QkvWeights | OWeight | GateUpWeights | DownWeight => bits == Some(4),
                HeadWeight => bits == Some(8),
            };
            if !ok {
                return Err(SilqError::Plan(format!(
                    "site `{site}` has {bits:?} bits, outside the deployment rules"
                )));
            }
        }
        Ok(())
    }

    pub fn setting(&self, site: Site) -> SiteSetting {
        self.sites.get(&site).copied().unwrap_or(SiteSetting::Off)
    }

    pub fn spec(&self, site: Site) -> Option<QuantizerSpec> {
        self.setting(site).spec().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Site, SiteSetting)> + '_ {
        self.sites.iter().map(|(&s, &v)| (s, v))
    }

    pub fn with_site(mut self, site: Site, setting: SiteSetting) -> Result<Self> {
        self.sites.insert(site, setting);
        self.validate()?;
        Ok(self)
    }

    /// Every site off: the unquantized model.
    pub fn full_precision() -> Self {
        PrecisionPlan {
            sites: Site::ALL.iter().map(|&s| (s, SiteSetting::Off)).collect(),
        }
    }

    /// `A8{s|d}-C{4|8}-W4` with a 16-bit query, 8-bit head and unquantized
    /// attention probabilities.
    pub fn a8_w4(act_timing: Timing, cache_bits: u8) -> Result<Self> {
        use Site::*;
        let q = SiteSetting::Quantize;
        let act8 = q(QuantizerSpec::activation(8, act_timing)?);
        let plan = Self::from_entries([
            (AttnInputAct, act8),
            (QkvWeights, q(QuantizerSpec::weight(4)?)),
            (QueryOut, q(QuantizerSpec::activation(16, act_timing)?)),
            (KeyCache, q(QuantizerSpec::cache(cache_bits, act_timing)?)),
            (ValueCache, q(QuantizerSpec::cache(cache_bits, act_timing)?)),
            (AttnProbs, SiteSetting::Off),
            (OInputAct, act8),
            (OWeight, q(QuantizerSpec::weight(4)?)),
            (MlpInputAct, act8),
            (GateUpWeights, q(QuantizerSpec::weight(4)?)),
            (DownInputAct, act8),
            (DownWeight, q(QuantizerSpec::weight(4)?)),
            (HeadInputAct, act8),
            (HeadWeight, q(QuantizerSpec::weight(8)?)),
            (Embedding, SiteSetting::Off),
        ])?;
        plan.validate_deployment()?;
        Ok(plan)
    }

    /// Every quantizable site (attention probabilities included) at `bits`.
    pub fn uniform(bits: u8, act_timing: Timing) -> Result<Self> {
        let entries = Site::ALL.iter().map(|&site| {
            let spec = match site.role() {
                None => return Ok((site, SiteSetting::Off)),
                Some(Role::Weight) => QuantizerSpec::weight(bits)?,
                Some(Role::Cache) => QuantizerSpec::cache(bits, act_timing)?,
                Some(Role::Activation) => QuantizerSpec::activation(bits, act_timing)?,
            };
            Ok((site, SiteSetting::Quantize(spec)))
        });
        Self::from_entries(entries.collect::<Result<Vec<_>>>()?)
    }

    pub fn is_full_precision(&self) -> bool {
        self.sites.values().all(|s| *s == SiteSetting::Off)
    }
}

/// Named plan presets accepted in configuration files, e.g. `a8s-c8-w4`,
/// `a8d-c4-w4`, `fp`, `uniform16`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanPreset {
    A8W4 { timing: Timing, cache_bits: u8 },
    FullPrecision,
    Uniform { bits: u8 },
}

impl PlanPreset {
    pub fn build(self) -> Result<PrecisionPlan> {
        match self {
            PlanPreset::A8W4 { timing, cache_bits } => PrecisionPlan::a8_w4(timing, cache_bits),
            PlanPreset::FullPrecision => Ok(PrecisionPlan::full_precision()),
            PlanPreset::Uniform { bits } => PrecisionPlan::uniform(bits, Timing::Static),
        }
    }
}

impl FromStr for PlanPreset {
    type Err = SilqError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        if lower == "fp" || lower == "full-precision" {
            return Ok(PlanPreset::FullPrecision);
        }
        if let Some(bits) = lower.strip_prefix("uniform") {
            let bits = bits
                .parse()
                .map_err(|_| SilqError::Config(format!("bad uniform preset `{s}`")))?;
            return Ok(PlanPreset::Uniform { bits });
        }
        let timing = match lower.get(..4) {
            Some("a8s-") => Timing::Static,
            Some("a8d-") => Timing::Dynamic,
            _ => return Err(SilqError::Config(format!("unknown plan preset `{s}`"))),
        };
        let cache_bits = match &lower[4..] {
            "c8-w4" => 8,
            "c4-w4" => 4,
            _ => return Err(SilqError::Config(format!("unknown plan preset `{s}`"))),
        };
        Ok(PlanPreset::A8W4 { timing, cache_bits })
    }
}

impl fmt::Display for PlanPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanPreset::A8W4 { timing, cache_bits } => {
                let t = if *timing == Timing::Static { 's' } else { 'd' };
                write!(f, "a8{t}-c{cache_bits}-w4")
            }
            PlanPreset::FullPrecision => f.write_str("fp"),
            PlanPreset::Uniform { bits } => write!(f, "uniform{bits}"),
        }
    }
}
