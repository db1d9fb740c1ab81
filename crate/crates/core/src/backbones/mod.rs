//! Seeded toy stand-ins for the pretrained dual encoder and the
//! encoder-decoder language model. All parameters are frozen unless a
//! variant explicitly unfreezes an encoder.

pub mod llm;
pub mod text;
pub mod tokenizer;
pub mod vision;

use serde::{Deserialize, Serialize};

use crate::nn::{InitOpts, Mat, NnError, ParamStore};

pub use llm::ToyEncDecLlm;
pub use text::ToyTextEncoder;
pub use tokenizer::Tokenizer;
pub use vision::{FrameTaps, ToyVisionBackbone};

#[derive(Debug, thiserror::Error)]
pub enum BackboneError {
    #[error("sequence of length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("frame shape mismatch: expected {expected:?}, got {got:?}")]
    FrameShape { expected: (usize, usize), got: (usize, usize) },
    #[error("decode steps must be at least 1")]
    ZeroSteps,
    #[error("vocabulary file: {0}")]
    Vocabulary(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Toy backbone dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_llm: usize,
    pub d_clip: usize,
    pub d_vis: usize,
    pub joint_dim: usize,
    pub vision_layers: usize,
    pub text_layers: usize,
    pub llm_encoder_layers: usize,
    pub llm_decoder_layers: usize,
    pub heads: usize,
    pub grid: usize,
    pub patch_dim: usize,
    pub text_max_len: usize,
    pub llm_max_len: usize,
    /// Share of embedding variance common to a synonym pair in the text encoder.
    pub clip_synonym_corr: f64,
    /// Same for the language model's token table.
    pub llm_synonym_corr: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_llm: 32,
            d_clip: 48,
            d_vis: 48,
            joint_dim: 32,
            vision_layers: 6,
            text_layers: 3,
            llm_encoder_layers: 2,
            llm_decoder_layers: 2,
            heads: 4,
            grid: 4,
            patch_dim: 8,
            text_max_len: 24,
            llm_max_len: 64,
            clip_synonym_corr: 0.5,
            llm_synonym_corr: 0.9,
            seed: 0,
        }
    }
}

/// Which encoders are trainable. Frozen is the default for all three.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BackboneTrainability {
    pub text: bool,
    pub vision: bool,
    pub llm: bool,
}

/// The three frozen models plus the tokenizer they share.
#[derive(Clone, Debug)]
pub struct Backbones {
    pub config: BackboneConfig,
    pub tokenizer: Tokenizer,
    pub text: ToyTextEncoder,
    pub vision: ToyVisionBackbone,
    pub llm: ToyEncDecLlm,
}

impl Backbones {
    /// Registers every backbone parameter in `store` under the prefixes
    /// `text.`, `vision.` and `llm.`.
    pub fn build(
        store: &mut ParamStore,
        config: &BackboneConfig,
        tokenizer: Tokenizer,
        synonyms: &[(&str, &str)],
        trainable: BackboneTrainability,
    ) -> Result<Self, BackboneError> {
        let groups = synonym_groups(&tokenizer, synonyms);
        let text = ToyTextEncoder::new(store, config, &tokenizer, &groups, InitOpts::new(config.seed, trainable.text))?;
        let vision = ToyVisionBackbone::new(store, config, InitOpts::new(config.seed, trainable.vision))?;
        let llm = ToyEncDecLlm::new(store, config, &tokenizer, &groups, InitOpts::new(config.seed, trainable.llm))?;
        Ok(Self {
            config: config.clone(),
            tokenizer,
            text,
            vision,
            llm,
        })
    }

    /// Default backbones over the synthetic word bank.
    pub fn from_wordbank(store: &mut ParamStore, config: &BackboneConfig) -> Result<Self, BackboneError> {
        let pairs = crate::data::wordbank::synonym_word_pairs();
        Self::build(store, config, Tokenizer::from_wordbank(), &pairs, BackboneTrainability::default())
    }
}

/// Group index per token id: synonym words share a group, every other token
/// is alone in its own.
pub fn synonym_groups(tokenizer: &Tokenizer, synonyms: &[(&str, &str)]) -> Vec<usize> {
    let mut group: Vec<usize> = (0..tokenizer.vocab_size()).collect();
    for (a, b) in synonyms {
        if let (Some(ia), Some(ib)) = (tokenizer.id(a), tokenizer.id(b)) {
            let g = group[ia as usize].min(group[ib as usize]);
            let old = [group[ia as usize], group[ib as usize]];
            for x in group.iter_mut() {
                if old.contains(x) {
                    *x = g;
                }
            }
        }
    }
    group
}

/// Embedding table whose rows mix a per-token and a per-group Gaussian
/// component: `row = √(1−ρ)·own + √ρ·shared`.
pub(crate) fn correlated_table(rows: usize, dim: usize, groups: &[usize], rho: f64, std: f64, seed: u64) -> Mat {
    assert_eq!(groups.len(), rows);
    let own = crate::nn::seeded_normal(rows, dim, seed, std);
    let shared = crate::nn::seeded_normal(rows, dim, crate::nn::init::splitmix64(seed ^ 0x5eed), std);
    let (a, b) = ((1.0 - rho).sqrt(), rho.sqrt());
    let mut size = vec![0usize; rows];
    for &g in groups {
        size[g] += 1;
    }
    let mut out = Mat::zeros(rows, dim);
    for r in 0..rows {
        let g = groups[r];
        if size[g] == 1 {
            out.row_mut(r).copy_from_slice(own.row(r));
            continue;
        }
        for c in 0..dim {
            out.set(r, c, a * own.get(r, c) + b * shared.get(g, c));
        }
    }
    out
}
