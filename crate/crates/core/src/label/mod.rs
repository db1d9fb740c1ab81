//! Label encoders: learnable LLM prompting with soft attributes, plus the
//! fixed-prompt, class-name, template and context-learning baselines.

pub mod fixed;

use std::collections::HashMap;
use std::rc::Rc;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneError, Backbones};
use crate::nn::init::{derive_seed, seeded_normal};
use crate::nn::{
    AttentionSpec, AttnLayout, InitOpts, InitScheme, Linear, Mat, NnError, ParamId, ParamStore, Precision, Tape,
    TransformerBlock, Var,
};

pub const LLM_TEMPLATE: &str = "Q: What are useful features for distinguishing a {label} in a photo? A: There are several useful visual features to tell about a {label} in a photo: 1.";
pub const CLASSNAME_TEMPLATE: &str = "a video of {label}";
pub const ATTRIBUTE_TEMPLATE: &str = "{label}, which has {attribute}";
pub const DEFAULT_TEMPLATES: &str = include_str!("../../resources/templates.txt");

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error("invalid label encoder config: {0}")]
    Config(String),
    #[error("label must be nonempty")]
    EmptyLabel,
    #[error("unknown label encoder variant {0:?}")]
    UnknownVariant(String),
    #[error("template {0:?} has no {{label}} placeholder")]
    Template(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Which label encoder a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelEncoderKind {
    LearnableLlm,
    FixedLlm,
    Coop,
    Dualcoop,
    Classname,
    Templates,
}

impl LabelEncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::LearnableLlm => "learnable_llm",
            Self::FixedLlm => "fixed_llm",
            Self::Coop => "coop",
            Self::Dualcoop => "dualcoop",
            Self::Classname => "classname",
            Self::Templates => "templates",
        }
    }
}

impl FromStr for LabelEncoderKind {
    type Err = LabelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "learnable_llm" => Self::LearnableLlm,
            "fixed_llm" => Self::FixedLlm,
            "coop" => Self::Coop,
            "dualcoop" => Self::Dualcoop,
            "classname" => Self::Classname,
            "templates" => Self::Templates,
            other => return Err(LabelError::UnknownVariant(other.to_string())),
        })
    }
}

/// Variant tag stored with every label embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingVariant {
    LearnableLlm,
    FixedLlm,
    Coop,
    DualcoopPos,
    DualcoopNeg,
    Classname,
    Templates,
}

impl EmbeddingVariant {
    pub const ALL: [EmbeddingVariant; 7] = [
        Self::LearnableLlm,
        Self::FixedLlm,
        Self::Coop,
        Self::DualcoopPos,
        Self::DualcoopNeg,
        Self::Classname,
        Self::Templates,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::LearnableLlm => "learnable_llm",
            Self::FixedLlm => "fixed_llm",
            Self::Coop => "coop",
            Self::DualcoopPos => "dualcoop_pos",
            Self::DualcoopNeg => "dualcoop_neg",
            Self::Classname => "classname",
            Self::Templates => "templates",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelEmbedding {
    pub label: String,
    pub vector: Vec<f64>,
    pub variant: EmbeddingVariant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEncoderConfig {
    pub kind: LabelEncoderKind,
    /// N learnable prefixes.
    pub n_prefixes: usize,
    /// K soft attributes per prefix.
    pub k_attributes: usize,
    /// L tokens per soft attribute (also the soft prompt length).
    pub l_tokens: usize,
    /// Explicit decode length; must equal `k_attributes * l_tokens` when set.
    pub decode_steps: Option<usize>,
    pub prompt_blocks: usize,
    /// Context length of the context-learning baselines.
    pub context_len: usize,
    /// Token budget of greedy decoding for the fixed-prompt baseline.
    pub fixed_max_steps: usize,
    pub templates: Vec<String>,
}

impl Default for LabelEncoderConfig {
    fn default() -> Self {
        Self {
            kind: LabelEncoderKind::LearnableLlm,
            n_prefixes: 4,
            k_attributes: 5,
            l_tokens: 5,
            decode_steps: None,
            prompt_blocks: 2,
            context_len: 3,
            fixed_max_steps: 16,
            templates: parse_templates(DEFAULT_TEMPLATES).expect("bundled templates are valid"),
        }
    }
}

/// One template per nonempty line; each must contain `{label}`.
pub fn parse_templates(text: &str) -> Result<Vec<String>, LabelError> {
    let out: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if let Some(bad) = out.iter().find(|t| !t.contains("{label}")) {
        return Err(LabelError::Template(bad.clone()));
    }
    Ok(out)
}

pub fn render(template: &str, label: &str) -> String {
    template.replace("{label}", label)
}

/// Token ids of the attribute-generation prompt for `label`.
pub fn build_template(tokenizer: &crate::backbones::Tokenizer, label: &str) -> Vec<u32> {
    tokenizer.tokenize(&render(LLM_TEMPLATE, label))
}

/// Linear lift from LLM width to text-encoder width followed by pre-norm
/// blocks; each `L`-row block is transformed independently.
#[derive(Clone, Debug)]
pub struct PromptTransformer {
    pub lift: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub block_len: usize,
}

impl PromptTransformer {
    pub fn new(
        store: &mut ParamStore,
        d_in: usize,
        d_out: usize,
        heads: usize,
        n_blocks: usize,
        block_len: usize,
        opts: InitOpts,
    ) -> Result<Self, LabelError> {
        let lift = Linear::new(store, "label.prompt.lift", d_in, d_out, InitScheme::NormalScaled, opts)?;
        let spec = AttentionSpec::new(heads, d_out, false)?;
        let blocks = (0..n_blocks)
            .map(|b| TransformerBlock::new(store, &format!("label.prompt.block{b}"), spec, 4, opts))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { lift, blocks, block_len })
    }

    /// `(m·L) × d_in` → `(m·L) × d_out`.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var, LabelError> {
        let rows = tape.shape(x).0;
        if rows % self.block_len != 0 {
            return Err(LabelError::Config(format!("{rows} rows is not a multiple of L={}", self.block_len)));
        }
        let l = self.block_len;
        let layout = AttnLayout::Grouped((0..rows / l).map(|b| (b * l..(b + 1) * l).collect()).collect());
        let mut h = self.lift.forward(tape, store, x);
        for b in &self.blocks {
            h = b.forward_with_layout(tape, store, h, &layout)?;
        }
        Ok(h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.lift.param_ids();
        for b in &self.blocks {
            v.extend(b.param_ids());
        }
        v
    }
}

/// Label features on a tape: `n × D` unit rows, plus the negative-prompt rows
/// of the dual-context baseline.
#[derive(Clone, Copy, Debug)]
pub struct LabelFeatures {
    pub pos: Var,
    pub neg: Option<Var>,
}

type SoftMap<'a> = &'a dyn Fn(&Tape, Var) -> Result<Var, LabelError>;

#[derive(Clone, Debug)]
pub struct LabelEncoder {
    pub config: LabelEncoderConfig,
    /// `N × d_llm` prefix bank.
    pub prefixes: Option<ParamId>,
    pub prompt_transformer: Option<PromptTransformer>,
    /// Shared context block (positive context for the dual variant).
    pub context: Option<ParamId>,
    pub neg_context: Option<ParamId>,
    calls: Arc<AtomicUsize>,
    fixed_cache: Arc<Mutex<HashMap<String, Vec<String>>>>,
}

impl LabelEncoder {
    pub fn new(store: &mut ParamStore, bb: &Backbones, config: &LabelEncoderConfig, seed: u64) -> Result<Self, LabelError> {
        let c = config;
        if c.n_prefixes == 0 || c.k_attributes == 0 || c.l_tokens == 0 {
            return Err(LabelError::Config("N, K and L must be at least 1".into()));
        }
        let kl = c.k_attributes * c.l_tokens;
        if let Some(steps) = c.decode_steps {
            if steps != kl {
                return Err(LabelError::Config(format!("decode steps {steps} != K*L = {kl}")));
            }
        }
        if kl > bb.llm.max_len {
            return Err(LabelError::Config(format!("K*L = {kl} exceeds decoder length {}", bb.llm.max_len)));
        }
        if c.templates.is_empty() {
            return Err(LabelError::Config("template list is empty".into()));
        }
        let opts = InitOpts::new(seed, true);
        let mut enc = Self {
            config: c.clone(),
            prefixes: None,
            prompt_transformer: None,
            context: None,
            neg_context: None,
            calls: Arc::new(AtomicUsize::new(0)),
            fixed_cache: Arc::new(Mutex::new(HashMap::new())),
        };
        match c.kind {
            LabelEncoderKind::LearnableLlm => {
                let p = seeded_normal(c.n_prefixes, bb.llm.width, derive_seed(seed, "label.prefixes"), 1.0);
                enc.prefixes = Some(store.add("label.prefixes", p, true)?);
                enc.prompt_transformer = Some(PromptTransformer::new(
                    store,
                    bb.llm.width,
                    bb.text.width,
                    bb.config.heads,
                    c.prompt_blocks,
                    c.l_tokens,
                    opts,
                )?);
            }
            LabelEncoderKind::Coop | LabelEncoderKind::Dualcoop => {
                let init = context_init(store, bb, c.context_len, seed);
                enc.context = Some(store.add("label.context", init.clone(), true)?);
                if c.kind == LabelEncoderKind::Dualcoop {
                    enc.neg_context = Some(store.add("label.neg_context", init, true)?);
                }
            }
            _ => {}
        }
        Ok(enc)
    }

    pub fn kind(&self) -> LabelEncoderKind {
        self.config.kind
    }

    /// Number of labels encoded so far through [`LabelEncoder::encode_labels`].
    pub fn encode_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = [self.prefixes, self.context, self.neg_context].into_iter().flatten().collect();
        if let Some(pt) = &self.prompt_transformer {
            v.extend(pt.param_ids());
        }
        v
    }

    /// Encodes every label once on `tape`.
    pub fn encode_labels(&self, tape: &Tape, store: &ParamStore, bb: &Backbones, labels: &[String]) -> Result<LabelFeatures, LabelError> {
        if labels.iter().any(|l| l.trim().is_empty()) {
            return Err(LabelError::EmptyLabel);
        }
        self.calls.fetch_add(labels.len(), Ordering::Relaxed);
        match self.config.kind {
            LabelEncoderKind::LearnableLlm => Ok(LabelFeatures {
                pos: self.encode_learnable(tape, store, bb, labels, None)?,
                neg: None,
            }),
            LabelEncoderKind::Coop => Ok(LabelFeatures {
                pos: self.encode_context(tape, store, bb, self.context.expect("context"), labels)?,
                neg: None,
            }),
            LabelEncoderKind::Dualcoop => Ok(LabelFeatures {
                pos: self.encode_context(tape, store, bb, self.context.expect("context"), labels)?,
                neg: Some(self.encode_context(tape, store, bb, self.neg_context.expect("neg context"), labels)?),
            }),
            _ => {
                let prompts: Vec<Vec<String>> = labels.iter().map(|l| self.prompt_strings(store, bb, l)).collect::<Result<_, _>>()?;
                Ok(LabelFeatures {
                    pos: encode_prompt_groups(tape, store, bb, &prompts)?,
                    neg: None,
                })
            }
        }
    }

    /// Inference embeddings. The dual-context variant yields a positive and a
    /// negative entry per label.
    pub fn embed_labels(&self, store: &ParamStore, bb: &Backbones, precision: Precision, labels: &[String]) -> Result<Vec<LabelEmbedding>, LabelError> {
        let tape = Tape::inference(precision);
        let f = self.encode_labels(&tape, store, bb, labels)?;
        let pos_variant = match self.config.kind {
            LabelEncoderKind::LearnableLlm => EmbeddingVariant::LearnableLlm,
            LabelEncoderKind::FixedLlm => EmbeddingVariant::FixedLlm,
            LabelEncoderKind::Coop => EmbeddingVariant::Coop,
            LabelEncoderKind::Dualcoop => EmbeddingVariant::DualcoopPos,
            LabelEncoderKind::Classname => EmbeddingVariant::Classname,
            LabelEncoderKind::Templates => EmbeddingVariant::Templates,
        };
        let mut out = Vec::new();
        let pos = tape.value(f.pos);
        let neg = f.neg.map(|n| tape.value(n));
        for (i, l) in labels.iter().enumerate() {
            out.push(LabelEmbedding {
                label: l.clone(),
                vector: pos.row(i).to_vec(),
                variant: pos_variant,
            });
            if let Some(n) = &neg {
                out.push(LabelEmbedding {
                    label: l.clone(),
                    vector: n.row(i).to_vec(),
                    variant: EmbeddingVariant::DualcoopNeg,
                });
            }
        }
        Ok(out)
    }

    /// K soft attributes (`L × d_llm` each) of prefix `i` for one label.
    pub fn generate_soft_attributes(&self, tape: &Tape, store: &ParamStore, bb: &Backbones, i: usize, label: &str) -> Result<Vec<Var>, LabelError> {
        let prefixes = self.prefixes.ok_or_else(|| LabelError::Config("encoder has no prefixes".into()))?;
        if i >= self.config.n_prefixes {
            return Err(LabelError::Config(format!("prefix index {i} out of range")));
        }
        let row = tape.slice_rows(tape.param(store, prefixes), i, 1);
        let ids = build_template(&bb.tokenizer, label);
        let enc = bb.llm.encode_batch(tape, store, &[(Some(row), &ids)])?;
        let (k, l) = (self.config.k_attributes, self.config.l_tokens);
        let states = bb.llm.decode_continuous_batch(tape, store, &enc, k * l)?.remove(0);
        Ok((0..k).map(|c| tape.slice_rows(states, c * l, l)).collect())
    }

    /// Learnable path with the prompt transformer optionally replaced by `soft_map`.
    pub fn encode_learnable(
        &self,
        tape: &Tape,
        store: &ParamStore,
        bb: &Backbones,
        labels: &[String],
        soft_map: Option<SoftMap<'_>>,
    ) -> Result<Var, LabelError> {
        let prefixes = self.prefixes.ok_or_else(|| LabelError::Config("encoder has no prefixes".into()))?;
        let (n_p, k, l) = (self.config.n_prefixes, self.config.k_attributes, self.config.l_tokens);
        let pv = tape.param(store, prefixes);
        let rows: Vec<Var> = (0..n_p).map(|i| tape.slice_rows(pv, i, 1)).collect();
        let templates: Vec<Vec<u32>> = labels.iter().map(|lab| build_template(&bb.tokenizer, lab)).collect();
        let items: Vec<(Option<Var>, &[u32])> = templates
            .iter()
            .flat_map(|t| rows.iter().map(move |&r| (Some(r), t.as_slice())))
            .collect();
        let enc = bb.llm.encode_batch(tape, store, &items)?;
        let decoded = bb.llm.decode_continuous_batch(tape, store, &enc, k * l)?;
        let stacked = if decoded.len() == 1 { decoded[0] } else { tape.concat_rows(&decoded) };
        let soft_all = match soft_map {
            Some(f) => f(tape, stacked)?,
            None => self
                .prompt_transformer
                .as_ref()
                .expect("learnable encoder has a prompt transformer")
                .forward(tape, store, stacked)?,
        };
        let label_ids: Vec<Vec<u32>> = labels.iter().map(|lab| bb.tokenizer.tokenize(lab)).collect();
        let per_label = n_p * k;
        let mut seqs = Vec::with_capacity(labels.len() * per_label);
        for (j, ids) in label_ids.iter().enumerate() {
            for c in 0..per_label {
                let soft = tape.slice_rows(soft_all, (j * per_label + c) * l, l);
                seqs.push(bb.text.soft_sequence(tape, store, soft, ids)?);
            }
        }
        let feats = bb.text.encode_embedding_batch(tape, store, &seqs)?;
        let groups = (0..labels.len()).map(|j| (j * per_label..(j + 1) * per_label).collect()).collect();
        Ok(tape.l2_normalize_rows(tape.group_mean(feats, Rc::new(groups))))
    }

    fn encode_context(&self, tape: &Tape, store: &ParamStore, bb: &Backbones, ctx: ParamId, labels: &[String]) -> Result<Var, LabelError> {
        let c = tape.param(store, ctx);
        let seqs = labels
            .iter()
            .map(|lab| bb.text.soft_sequence(tape, store, c, &bb.tokenizer.tokenize(lab)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(bb.text.encode_embedding_batch(tape, store, &seqs)?)
    }

    /// Text prompts pooled by the fixed-prompt variants.
    pub fn prompt_strings(&self, store: &ParamStore, bb: &Backbones, label: &str) -> Result<Vec<String>, LabelError> {
        Ok(match self.config.kind {
            LabelEncoderKind::Classname => vec![render(CLASSNAME_TEMPLATE, label)],
            LabelEncoderKind::Templates => self.config.templates.iter().map(|t| render(t, label)).collect(),
            LabelEncoderKind::FixedLlm => {
                let attrs = self.fixed_attributes(store, bb, label)?;
                if attrs.is_empty() {
                    log::warn!("no attributes decoded for {label:?}; falling back to the class-name prompt");
                    vec![render(CLASSNAME_TEMPLATE, label)]
                } else {
                    let mut v: Vec<String> = attrs
                        .iter()
                        .map(|a| ATTRIBUTE_TEMPLATE.replace("{label}", label).replace("{attribute}", a))
                        .collect();
                    v.push(render(CLASSNAME_TEMPLATE, label));
                    v
                }
            }
            other => return Err(LabelError::Config(format!("{} has no text prompts", other.as_str()))),
        })
    }

    /// Greedy-decoded, parsed and deduplicated attributes for `label` (cached).
    pub fn fixed_attributes(&self, store: &ParamStore, bb: &Backbones, label: &str) -> Result<Vec<String>, LabelError> {
        if let Some(v) = self.fixed_cache.lock().expect("cache lock").get(label) {
            return Ok(v.clone());
        }
        let text = self.decode_fixed_text(store, bb, label)?;
        let attrs = fixed::dedup_attributes(&fixed::parse_numbered_list(&text));
        self.fixed_cache.lock().expect("cache lock").insert(label.to_string(), attrs.clone());
        Ok(attrs)
    }

    /// Raw greedy completion of the attribute prompt.
    pub fn decode_fixed_text(&self, store: &ParamStore, bb: &Backbones, label: &str) -> Result<String, LabelError> {
        let tape = Tape::inference(Precision::F64);
        let states = bb.llm.encode_tokens(&tape, store, &build_template(&bb.tokenizer, label))?;
        Ok(bb.llm.llm_decode_discrete(store, &bb.tokenizer, &tape.value(states), self.config.fixed_max_steps)?)
    }
}

/// Positive-class probability of the dual-context baseline: the positive
/// component of a softmax over `(s_pos/τ, s_neg/τ)`.
pub fn dualcoop_probability(s_pos: f64, s_neg: f64, tau: f64) -> f64 {
    crate::nn::tape::sigmoid((s_pos - s_neg) / tau)
}

/// Context init: the token rows of "a video of" when the length matches,
/// otherwise Gaussian rows.
fn context_init(store: &ParamStore, bb: &Backbones, len: usize, seed: u64) -> Mat {
    let words = bb.tokenizer.encode_words(&render(CLASSNAME_TEMPLATE, "")).to_vec();
    if words.len() == len {
        bb.text.token_rows(store, &words)
    } else {
        seeded_normal(len, bb.text.width, derive_seed(seed, "label.context"), 1.0)
    }
}

/// Encodes every prompt, averages within each label's group and normalizes.
/// Overlong prompts are truncated to the text encoder's length.
pub fn encode_prompt_groups(tape: &Tape, store: &ParamStore, bb: &Backbones, prompts: &[Vec<String>]) -> Result<Var, LabelError> {
    let mut seqs = Vec::new();
    let mut groups = Vec::with_capacity(prompts.len());
    for g in prompts {
        let start = seqs.len();
        for p in g {
            let mut ids = bb.tokenizer.tokenize(p);
            if ids.len() > bb.text.max_len {
                ids.truncate(bb.text.max_len - 1);
                ids.push(crate::backbones::tokenizer::EOT);
            }
            seqs.push(bb.text.embed_ids(tape, store, &ids));
        }
        groups.push((start..seqs.len()).collect::<Vec<_>>());
    }
    let feats = bb.text.encode_embedding_batch(tape, store, &seqs)?;
    Ok(tape.l2_normalize_rows(tape.group_mean(feats, Rc::new(groups))))
}

#[cfg(test)]
mod tests;
