//! The assembled model: backbones, label encoder and video encoder over one
//! parameter store, with the freeze policy applied.

use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneConfig, BackboneError, BackboneTrainability, Backbones, Tokenizer};
use crate::data::wordbank::synonym_word_pairs;
use crate::label::{LabelEncoder, LabelEncoderConfig, LabelEncoderKind, LabelError};
use crate::nn::{NnError, ParamId, ParamStore};
use crate::video::{VideoEncoder, VideoEncoderConfig, VideoError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid freeze policy: {0}")]
    Policy(String),
}

/// Which components learn. The default trains only the prompt parameters
/// and the temporal branch; everything pretrained stays frozen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FreezePolicy {
    pub freeze_llm: bool,
    pub freeze_text: bool,
    pub freeze_vision: bool,
    pub train_label_encoder: bool,
    pub train_video_branch: bool,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        Self {
            freeze_llm: true,
            freeze_text: true,
            freeze_vision: true,
            train_label_encoder: true,
            train_video_branch: true,
        }
    }
}

impl FreezePolicy {
    /// Both dual encoders finetuned, class-name prompts, no temporal branch.
    pub fn vifi_clip() -> Self {
        Self {
            freeze_llm: true,
            freeze_text: false,
            freeze_vision: false,
            train_label_encoder: false,
            train_video_branch: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub label: LabelEncoderConfig,
    pub video: VideoEncoderConfig,
    pub freeze: FreezePolicy,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            label: LabelEncoderConfig::default(),
            video: VideoEncoderConfig::default(),
            freeze: FreezePolicy::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// ViFi-CLIP style baseline: class-name labels through a finetuned text
    /// encoder, frame-mean video embeddings from a finetuned vision encoder.
    pub fn vifi_clip(mut self) -> Self {
        self.label.kind = LabelEncoderKind::Classname;
        self.video.enabled = false;
        self.freeze = FreezePolicy::vifi_clip();
        self
    }
}

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbones: Backbones,
    pub label: LabelEncoder,
    pub video: VideoEncoder,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        let f = config.freeze;
        let mut store = ParamStore::new();
        let trainable = BackboneTrainability {
            text: !f.freeze_text,
            vision: !f.freeze_vision,
            llm: !f.freeze_llm,
        };
        let backbones = Backbones::build(&mut store, &config.backbone, Tokenizer::from_wordbank(), &synonym_word_pairs(), trainable)?;
        let label = LabelEncoder::new(&mut store, &backbones, &config.label, config.seed)?;
        let video = VideoEncoder::new(&mut store, &backbones, config.video.clone(), config.seed)?;
        if !f.train_label_encoder {
            for id in label.param_ids() {
                store.set_trainable(id, false);
            }
        }
        if !f.train_video_branch {
            for id in video.param_ids() {
                store.set_trainable(id, false);
            }
        }
        Ok(Self {
            config,
            store,
            backbones,
            label,
            video,
        })
    }

    /// Parameters the policy allows to change.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.trainable_ids()
    }

    pub fn backbone_ids(&self) -> Vec<ParamId> {
        let bb = &self.backbones;
        let mut v = bb.text.param_ids();
        v.extend(bb.vision.param_ids());
        v.extend(bb.llm.param_ids());
        v
    }
}
