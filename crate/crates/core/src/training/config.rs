use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::losses::LossWeights;
use crate::maskops::StreamSpec;
use crate::models::{DiscCfg, DiscScale, GeneratorCfg, SegmenterCfg, SingleStreamGenCfg, UpscaleGenCfg};
use crate::{Error, Result};

pub const CONFIG_SCHEMA: &str = "v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schema: String,
    pub phase: u8,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    /// Side ratio between the full-resolution data and the phase-1 images.
    pub low_res_factor: usize,
    /// Image-pool capacity; 0 disables the pool.
    pub pool_size: usize,
    /// Checkpoint period in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    #[serde(default)]
    pub data: DataCfg,
    #[serde(default)]
    pub optim: OptimCfg,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub streams: StreamSpec,
    #[serde(default)]
    pub identity_masks: IdentityMasks,
    pub model: ModelCfg,
    #[serde(default)]
    pub phase2: Phase2Cfg,
    #[serde(default)]
    pub debug: DebugCfg,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataCfg {
    /// Dataset manifest; relative paths resolve against the working directory.
    #[serde(default)]
    pub manifest: String,
    /// Use at most this many samples per domain (0 = all).
    #[serde(default)]
    pub limit: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimCfg {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of training after which the step size decays linearly to 0.
    pub decay_start: f64,
}

impl Default for OptimCfg {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            decay_start: 0.5,
        }
    }
}

/// Source of the stream masks for domain-B inputs of a mask-consuming
/// generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityMasks {
    /// Argmax of the jointly trained segmenter.
    #[default]
    Segmenter,
    /// Whole image routed to the catch-all stream.
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCfg {
    pub generator: GeneratorCfg,
    pub reverse: ReverseCfg,
    pub disc_width: usize,
    pub segmenter: SegmenterCfg,
    pub upscaler: UpscaleGenCfg,
    /// Width of the full-resolution discriminators of phase 2.
    pub disc2_width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReverseCfg {
    pub width: usize,
    pub trunk_blocks: usize,
}

impl ReverseCfg {
    pub fn generator(&self) -> SingleStreamGenCfg {
        SingleStreamGenCfg {
            in_channels: 3,
            width: self.width,
            trunk_blocks: self.trunk_blocks,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceSource {
    /// Frozen phase-1 translation of the downsampled input.
    #[default]
    Phase1,
    /// Blurred, downsampled input (phase-1 generator replaced by identity).
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Phase2Cfg {
    pub blur_sigma: f32,
    pub guidance: GuidanceSource,
    /// Apply the segmentation term (frozen phase-1 segmenter) in phase 2.
    pub semseg: bool,
}

impl Default for Phase2Cfg {
    fn default() -> Self {
        Self {
            blur_sigma: 1.0,
            guidance: GuidanceSource::Phase1,
            semseg: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DebugCfg {
    /// Poison the translated batch with NaN at this step (fault injection).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inject_nan_at_step: Option<u64>,
}

impl Default for TrainConfig {
    /// Desk-scale settings for 64x64 data.
    fn default() -> Self {
        let streams = StreamSpec::default();
        Self {
            schema: CONFIG_SCHEMA.into(),
            phase: 1,
            seed: 0,
            steps: 1000,
            batch_size: 4,
            low_res_factor: 4,
            pool_size: 50,
            checkpoint_every: 0,
            data: DataCfg::default(),
            optim: OptimCfg::default(),
            loss: LossWeights::default(),
            identity_masks: IdentityMasks::default(),
            model: ModelCfg {
                generator: GeneratorCfg::MultiStream {
                    streams: streams.streams,
                    stem_blocks: 3,
                    width: 8,
                    trunk_blocks: 4,
                },
                reverse: ReverseCfg {
                    width: 8,
                    trunk_blocks: 4,
                },
                disc_width: 16,
                segmenter: SegmenterCfg::new(crate::data::CLASS_NAMES.len(), 8),
                upscaler: UpscaleGenCfg {
                    factor: 4,
                    width: 8,
                    trunk_blocks: 2,
                    use_guidance: true,
                },
                disc2_width: 8,
            },
            streams,
            phase2: Phase2Cfg::default(),
            debug: DebugCfg::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema != CONFIG_SCHEMA {
            return bad(format!("unsupported config schema `{}`", self.schema));
        }
        if !(1..=2).contains(&self.phase) {
            return bad(format!("phase must be 1 or 2, got {}", self.phase));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.low_res_factor == 0 {
            return bad("low_res_factor must be at least 1".into());
        }
        if self.model.upscaler.factor != self.low_res_factor {
            return bad(format!(
                "model.upscaler.factor ({}) must equal low_res_factor ({})",
                self.model.upscaler.factor, self.low_res_factor
            ));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return bad("optim: need lr > 0, betas in [0, 1), eps > 0".into());
        }
        if !(0.0..=1.0).contains(&o.decay_start) {
            return bad("optim.decay_start must lie in [0, 1]".into());
        }
        if !(self.phase2.blur_sigma > 0.0) {
            return bad("phase2.blur_sigma must be positive".into());
        }
        self.loss.validate()?;
        self.streams.validate()?;
        self.model.generator.validate()?;
        if let Some(k) = self.model.generator.mask_streams() {
            if k != self.streams.streams {
                return bad(format!(
                    "generator consumes {k} streams but the stream spec defines {}",
                    self.streams.streams
                ));
            }
        }
        self.model.segmenter.validate()?;
        if self.model.disc_width == 0 || self.model.disc2_width == 0 || self.model.reverse.width == 0 {
            return bad("model widths must be positive".into());
        }
        Ok(())
    }

    /// Discriminator trio for square images of side `size`.
    pub fn disc_trio(&self, size: usize, phase: u8) -> [DiscCfg; 3] {
        let width = if phase == 1 { self.model.disc_width } else { self.model.disc2_width };
        DiscScale::ALL.map(|s| DiscCfg::for_scale(s, size, width))
    }

    /// Applies `section.key=value` overrides. Keys must exist in the schema
    /// and values must have the type of the field they replace.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
            set_dotted(&mut root, key.trim(), raw.trim())?;
        }
        let cfg: TrainConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_literal(raw: &str) -> Option<toml::Value> {
    let doc: toml::Table = toml::from_str(&format!("v = {raw}")).ok()?;
    doc.get("v").cloned()
}

fn set_dotted(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut node = root;
    for p in path {
        node = node
            .get_mut(*p)
            .filter(|v| v.is_table())
            .ok_or_else(|| Error::Config(format!("unknown config section `{p}` in `{key}`")))?;
    }
    let table = node.as_table_mut().expect("checked table");
    let existing = table.get(*last).cloned();
    let value = match &existing {
        Some(toml::Value::String(_)) => {
            toml::Value::String(match parse_literal(raw) {
                Some(toml::Value::String(s)) => s,
                _ => raw.to_string(),
            })
        }
        Some(old) => {
            let v = parse_literal(raw)
                .ok_or_else(|| Error::Config(format!("cannot parse value `{raw}` for `{key}`")))?;
            match (old, v) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (o, v) if std::mem::discriminant(o) == std::mem::discriminant(&v) => v,
                (o, v) => {
                    return Err(Error::Config(format!(
                        "`{key}` expects a {}, got {}",
                        o.type_str(),
                        v.type_str()
                    )))
                }
            }
        }
        // absent optional fields: the schema decides on deserialisation
        None => parse_literal(raw)
            .ok_or_else(|| Error::Config(format!("cannot parse value `{raw}` for `{key}`")))?,
    };
    table.insert(last.to_string(), value);
    Ok(())
}
