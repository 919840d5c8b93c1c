//! Resolved run configuration: defaults, then a JSON file, then `key=value`
//! overrides addressed by dotted path. Unknown keys are errors at every
//! layer.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::BackboneConfig;
use crate::dataset::{ACTION_DIM, STATE_DIM};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::expert::DitConfig;
use crate::flow::{FlowConfig, SamplerConfig};
use crate::integration::Variant;
use crate::model::ModelConfig;
use crate::optim::AdamW;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegrationConfig {
    pub variant: Variant,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        IntegrationConfig { variant: Variant::A }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChunkConfig {
    pub h: usize,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        ChunkConfig { h: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct DimConfig {
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Single-stage budget; 0 means `stage1_steps + stage2_steps`.
    pub single_steps: usize,
    pub batch_size: usize,
    pub lr_stage1: f64,
    pub lr_backbone: f64,
    pub lr_expert: f64,
    pub warmup_steps: usize,
    /// Global-norm clip applied separately to the backbone and the rest;
    /// 0 disables clipping.
    pub grad_clip: f64,
    pub optimizer: AdamW,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_steps: 1200,
            stage2_steps: 250,
            single_steps: 0,
            batch_size: 32,
            lr_stage1: 1e-3,
            lr_backbone: 1e-4,
            lr_expert: 3e-4,
            warmup_steps: 100,
            grad_clip: 1.0,
            optimizer: AdamW::default(),
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn single_budget(&self) -> usize {
        if self.single_steps == 0 {
            self.stage1_steps + self.stage2_steps
        } else {
            self.single_steps
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.lr_stage1 > 0.0 && self.lr_expert > 0.0 && self.lr_backbone >= 0.0) {
            return Err(Error::Config(
                "learning rates must be positive (backbone may be 0)".into(),
            ));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("train.grad_clip must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,
    pub out_dir: String,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub dit: DitConfig,
    pub integration: IntegrationConfig,
    pub chunk: ChunkConfig,
    pub action: DimConfig,
    pub state: DimConfig,
    pub flow: FlowConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub env: EnvConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "default".into(),
            out_dir: "runs".into(),
            seed: 0,
            backbone: BackboneConfig::default(),
            dit: DitConfig::default(),
            integration: IntegrationConfig::default(),
            chunk: ChunkConfig::default(),
            action: DimConfig { dim: ACTION_DIM },
            state: DimConfig { dim: STATE_DIM },
            flow: FlowConfig::default(),
            sampler: SamplerConfig::default(),
            train: TrainConfig::default(),
            env: EnvConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Sets one dotted key. The value is parsed as JSON when possible and
    /// taken as a string otherwise (`integration.variant=B`).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        let mut node = &mut tree;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        *node = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Applies `key=value` pairs in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        for p in pairs {
            let (k, v) = p
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?} is not key=value", p.as_ref())))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            dit: self.dit.clone(),
            variant: self.integration.variant,
            chunk_h: self.chunk.h,
            action_dim: self.action.dim,
            state_dim: self.state.dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.flow.validate()?;
        self.train.validate()?;
        self.env.validate()?;
        if self.sampler.steps == 0 {
            return Err(Error::Config("sampler.steps must be at least 1".into()));
        }
        if self.action.dim != ACTION_DIM || self.state.dim != STATE_DIM {
            return Err(Error::Config(format!(
                "the toy environments use action.dim={ACTION_DIM} and state.dim={STATE_DIM}"
            )));
        }
        if self.env.image_size != self.backbone.image_size || self.env.views != self.backbone.views {
            return Err(Error::Config(
                "env and backbone disagree on image size or view count".into(),
            ));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid run id {:?}", self.run_id)));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> std::path::PathBuf {
        Path::new(&self.out_dir).join(&self.run_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(c.model(), ModelConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"train": {"stpes": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        let mut c = RunConfig::default();
        assert!(c.set("train.nope", "1").is_err());
        assert!(c.set("dit", "3").is_err());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 9, "dit": {"depth": 2}}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.dit.depth, 2);
        assert_eq!(c.dit.width, 128);
    }

    #[test]
    fn overrides_parse_numbers_strings_and_arrays() {
        let mut c = RunConfig::default();
        c.apply_overrides(&[
            "integration.variant=C",
            "train.stage1_steps=10",
            "flow.clamp=[0.1,0.9]",
            "run_id=abc",
        ])
        .unwrap();
        assert_eq!(c.integration.variant, Variant::C);
        assert_eq!(c.train.stage1_steps, 10);
        assert_eq!(c.flow.clamp, [0.1, 0.9]);
        assert_eq!(c.run_id, "abc");
        assert!(c.apply_overrides(&["seed"]).is_err());
        assert!(c.apply_overrides(&["seed=-1"]).is_err());
    }

    #[test]
    fn cross_field_checks() {
        let mut c = RunConfig::default();
        c.dit.width = 64;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.env.image_size = 16;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.sampler.steps = 0;
        assert!(c.validate().is_err());
    }
}
