//! Run configuration as a flat JSON object of dotted keys. Every default is
//! a named key; a file only lists the keys it changes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::SyntheticDatasetSpec;
use crate::model::ModelConfig;
use crate::nn::Precision;
use crate::pipeline::{AssignConfig, DedupConfig};
use crate::train::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config file must hold a flat JSON object of dotted keys")]
    NotFlat,
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub precision: Precision,
    /// Decision threshold on s for `infer`; None uses the calibrated one.
    pub threshold: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F64,
            threshold: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub dedup: DedupConfig,
    pub assign: AssignConfig,
    /// Width of the bag-of-words stub embedder.
    pub stub_dim: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dedup: DedupConfig::default(),
            assign: AssignConfig::default(),
            stub_dim: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Run seed; `--seed` sets it and it drives model init and training.
    pub seed: u64,
    pub data_seed: u64,
    pub data: SyntheticDatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_seed: 0,
            data: SyntheticDatasetSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

/// Short names for the keys most runs touch.
pub const ALIASES: &[(&str, &str)] = &[
    ("temporal.blocks", "model.video.blocks"),
    ("temporal.lambda", "model.video.swa.lambda"),
    ("temporal.mode", "model.video.swa.mode"),
    ("temporal.anchor_l2", "model.video.swa.anchor_l2_coeff"),
    ("temporal.enabled", "model.video.enabled"),
    ("temporal.disable_temporal_attention", "model.video.disable_temporal_attention"),
    ("video.frames_per_clip", "model.video.frames_per_clip"),
    ("video.eval_clips", "model.video.eval_clips"),
    ("label_encoder.variant", "model.label.kind"),
];

/// Negated alias: `backbone.unfreeze: true` trains the vision backbone.
const UNFREEZE_KEY: &str = "backbone.unfreeze";

pub fn flatten(v: &Value) -> BTreeMap<String, Value> {
    fn go(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, x) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    go(&key, x, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    go("", v, &mut out);
    out
}

pub fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            let entry = node.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
            if !entry.is_object() {
                *entry = Value::Object(Map::new());
            }
            node = entry.as_object_mut().expect("object");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

fn is_prefix(a: &str, b: &str) -> bool {
    b.len() > a.len() && b.starts_with(a) && b.as_bytes()[a.len()] == b'.'
}

impl RunConfig {
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        flatten(&serde_json::to_value(self).expect("config serializes"))
    }

    pub fn to_flat_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_flat()).expect("map serializes");
        s.push('\n');
        s
    }

    /// Applies dotted-key overrides on top of `self`. A key may also replace
    /// a whole subtree (an enum switching variant) or a leaf of a variant
    /// the default does not use.
    pub fn with_overrides(&self, overrides: &Map<String, Value>) -> Result<Self, ConfigError> {
        let mut flat = self.to_flat();
        let known: Vec<String> = flat.keys().cloned().collect();
        for (raw, v) in overrides {
            let (key, v) = if raw == UNFREEZE_KEY {
                let b = v.as_bool().ok_or_else(|| ConfigError::Invalid(format!("{UNFREEZE_KEY} must be a boolean")))?;
                ("model.freeze.freeze_vision".to_string(), Value::Bool(!b))
            } else {
                let key = ALIASES.iter().find(|(a, _)| a == raw).map_or(raw.as_str(), |(_, k)| k).to_string();
                (key, v.clone())
            };
            let valid = known.iter().any(|k| *k == key || is_prefix(&key, k) || is_prefix(k, &key));
            if !valid {
                return Err(ConfigError::UnknownKey(raw.clone()));
            }
            flat.retain(|k, _| !is_prefix(&key, k) && !is_prefix(k, &key));
            flat.insert(key, v);
        }
        let cfg: RunConfig = serde_json::from_value(unflatten(&flat)).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_flat_json(text: &str) -> Result<Self, ConfigError> {
        let v: Value = serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let Value::Object(m) = v else {
            return Err(ConfigError::NotFlat);
        };
        if m.values().any(Value::is_object) {
            return Err(ConfigError::NotFlat);
        }
        Self::default().with_overrides(&m)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::from_flat_json(&text)
    }

    /// Sets the run seed everywhere it is consumed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.pipeline.dedup.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.data.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model.video.swa.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.pipeline.stub_dim == 0 {
            return Err(ConfigError::Invalid("pipeline.stub_dim must be positive".into()));
        }
        Ok(())
    }

    /// Minutes-scale CPU preset: a smaller label encoder and branch, and a
    /// higher learning rate so 2000 steps suffice.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.model.label.n_prefixes = 3;
        c.model.label.k_attributes = 4;
        c.model.label.l_tokens = 3;
        c.model.video.blocks = 4;
        c.train.base_lr = 1e-3;
        c
    }

    /// Schedule and sampling values of the full-scale recipe, on the toy
    /// backbones.
    pub fn paper() -> Self {
        let mut c = Self::default();
        c.train.steps = 30_000;
        c.train.warmup_steps = 2_000;
        c.train.base_lr = 1e-5;
        c.train.batch_size = 4;
        c.train.eval_every = 2_000;
        c.train.checkpoint_every = 2_000;
        c.model.video.frames_per_clip = 8;
        c.model.video.eval_clips = 4;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flat_round_trip() {
        let c = RunConfig::desk().with_seed(7);
        let back = RunConfig::from_flat_json(&c.to_flat_json()).unwrap();
        assert_eq!(back, c);
        assert!(c.to_flat().contains_key("train.loss.temperature"));
    }

    #[test]
    fn aliases_and_variants() {
        let m = json!({
            "temporal.blocks": 2,
            "label_encoder.variant": "classname",
            "backbone.unfreeze": true,
            "train.loss.negative_weight": "balanced",
            "eval.threshold": 0.3
        });
        let c = RunConfig::default().with_overrides(m.as_object().unwrap()).unwrap();
        assert_eq!(c.model.video.blocks, 2);
        assert_eq!(c.model.label.kind, crate::label::LabelEncoderKind::Classname);
        assert!(!c.model.freeze.freeze_vision);
        assert_eq!(c.train.loss.negative_weight, crate::train::NegativeWeight::Balanced);
        assert_eq!(c.eval.threshold, Some(0.3));
        let back = RunConfig::default().with_overrides(json!({"train.loss.negative_weight.fixed": 2.0}).as_object().unwrap()).unwrap();
        assert_eq!(back.train.loss.negative_weight, crate::train::NegativeWeight::Fixed(2.0));
    }

    #[test]
    fn shipped_presets_match_their_constructors() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
        assert_eq!(RunConfig::load(&dir.join("desk.json")).unwrap(), RunConfig::desk());
        assert_eq!(RunConfig::load(&dir.join("paper.json")).unwrap(), RunConfig::paper());
    }

    #[test]
    fn rejects_unknown_and_nested() {
        assert!(matches!(RunConfig::from_flat_json(r#"{"train.stepz": 3}"#), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(RunConfig::from_flat_json(r#"{"train": {"steps": 3}}"#), Err(ConfigError::NotFlat)));
        assert!(matches!(RunConfig::from_flat_json(r#"{"temporal.lambda": 2.0}"#), Err(ConfigError::Invalid(_))));
    }
}
