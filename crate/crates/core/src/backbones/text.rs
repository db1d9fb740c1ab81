//! Causal text encoder pooled at the last (`EOT`) position.

use std::rc::Rc;

use super::tokenizer::Tokenizer;
use super::{correlated_table, BackboneConfig, BackboneError};
use crate::nn::init::{derive_seed, seeded_normal};
use crate::nn::layers::embedding_table;
use crate::nn::{AttentionSpec, AttnLayout, InitOpts, LayerNorm, Mat, ParamId, ParamStore, Tape, TransformerBlock, Var};

#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    pub token_embedding: ParamId,
    pub positional: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_final: LayerNorm,
    pub projection: ParamId,
    pub width: usize,
    pub max_len: usize,
    pub joint_dim: usize,
}

impl ToyTextEncoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: &BackboneConfig,
        tokenizer: &Tokenizer,
        groups: &[usize],
        opts: InitOpts,
    ) -> Result<Self, BackboneError> {
        let d = cfg.d_clip;
        let table = correlated_table(
            tokenizer.vocab_size(),
            d,
            groups,
            cfg.clip_synonym_corr,
            1.0,
            derive_seed(opts.seed, "text.token_embedding"),
        );
        let token_embedding = store.add_in_group("text.token_embedding", table, opts.trainable, opts.group)?;
        let positional = embedding_table(store, "text.positional", cfg.text_max_len, d, 0.5, opts)?;
        let spec = AttentionSpec::new(cfg.heads, d, true)?;
        let blocks = (0..cfg.text_layers)
            .map(|l| TransformerBlock::new(store, &format!("text.layer{l}"), spec, 4, opts))
            .collect::<Result<Vec<_>, _>>()?;
        let ln_final = LayerNorm::new(store, "text.ln_final", d, opts)?;
        let proj = seeded_normal(d, cfg.joint_dim, derive_seed(opts.seed, "text.projection"), 1.0 / (d as f64).sqrt());
        let projection = store.add_in_group("text.projection", proj, opts.trainable, opts.group)?;
        Ok(Self {
            token_embedding,
            positional,
            blocks,
            ln_final,
            projection,
            width: d,
            max_len: cfg.text_max_len,
            joint_dim: cfg.joint_dim,
        })
    }

    /// Rows of the token table for `ids`, as a plain matrix.
    pub fn token_rows(&self, store: &ParamStore, ids: &[u32]) -> Mat {
        let table = store.values(self.token_embedding);
        let rows: Vec<Vec<f64>> = ids.iter().map(|&i| table.row(i as usize).to_vec()).collect();
        Mat::from_rows(&rows)
    }

    pub fn embed_ids(&self, tape: &Tape, store: &ParamStore, ids: &[u32]) -> Var {
        let table = tape.param(store, self.token_embedding);
        tape.gather_rows(table, Rc::new(ids.iter().map(|&i| i as usize).collect()))
    }

    /// Encodes several input-embedding sequences (each `len × width`, without
    /// positions) in one stacked pass. Returns `k × joint_dim` unit rows.
    pub fn encode_embedding_batch(&self, tape: &Tape, store: &ParamStore, seqs: &[Var]) -> Result<Var, BackboneError> {
        let mut parts = Vec::with_capacity(seqs.len());
        let mut groups = Vec::with_capacity(seqs.len());
        let mut last = Vec::with_capacity(seqs.len());
        let pos = tape.param(store, self.positional);
        let mut offset = 0;
        for &x in seqs {
            let (n, w) = tape.shape(x);
            if w != self.width {
                return Err(BackboneError::WidthMismatch { expected: self.width, got: w });
            }
            if n > self.max_len || n == 0 {
                return Err(BackboneError::SequenceTooLong { len: n, max: self.max_len });
            }
            parts.push(tape.add(x, tape.slice_rows(pos, 0, n)));
            groups.push((offset..offset + n).collect::<Vec<_>>());
            offset += n;
            last.push(offset - 1);
        }
        let mut h = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) };
        let layout = if groups.len() == 1 { AttnLayout::Causal } else { AttnLayout::GroupedCausal(groups) };
        for b in &self.blocks {
            h = b.forward_with_layout(tape, store, h, &layout)?;
        }
        let pooled = tape.gather_rows(h, Rc::new(last));
        let pooled = self.ln_final.forward(tape, store, pooled);
        let proj = tape.param(store, self.projection);
        Ok(tape.l2_normalize_rows(tape.matmul(pooled, proj)))
    }

    /// Unit `1 × joint_dim` encoding of one embedding sequence.
    pub fn encode_embeddings(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var, BackboneError> {
        self.encode_embedding_batch(tape, store, &[x])
    }

    pub fn clip_encode_text(&self, tape: &Tape, store: &ParamStore, ids: &[u32]) -> Result<Var, BackboneError> {
        self.check_len(ids.len())?;
        let x = self.embed_ids(tape, store, ids);
        self.encode_embeddings(tape, store, x)
    }

    /// Soft prompt rows go first, then the embedded `label_ids` (which end in `EOT`).
    pub fn soft_sequence(&self, tape: &Tape, store: &ParamStore, soft: Var, label_ids: &[u32]) -> Result<Var, BackboneError> {
        let (p, w) = tape.shape(soft);
        if w != self.width {
            return Err(BackboneError::WidthMismatch { expected: self.width, got: w });
        }
        self.check_len(p + label_ids.len())?;
        if label_ids.is_empty() {
            return Ok(soft);
        }
        let lab = self.embed_ids(tape, store, label_ids);
        Ok(if p == 0 { lab } else { tape.concat_rows(&[soft, lab]) })
    }

    pub fn clip_encode_text_soft(
        &self,
        tape: &Tape,
        store: &ParamStore,
        soft: Var,
        label_ids: &[u32],
    ) -> Result<Var, BackboneError> {
        let x = self.soft_sequence(tape, store, soft, label_ids)?;
        self.encode_embeddings(tape, store, x)
    }

    /// Inference helper returning a plain vector.
    pub fn encode_text_vec(&self, store: &ParamStore, precision: crate::nn::Precision, ids: &[u32]) -> Result<Vec<f64>, BackboneError> {
        let tape = Tape::inference(precision);
        let v = self.clip_encode_text(&tape, store, ids)?;
        Ok(tape.value(v).data().to_vec())
    }

    fn check_len(&self, n: usize) -> Result<(), BackboneError> {
        if n > self.max_len {
            return Err(BackboneError::SequenceTooLong { len: n, max: self.max_len });
        }
        Ok(())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.token_embedding, self.positional];
        for b in &self.blocks {
            v.extend(b.param_ids());
        }
        v.extend(self.ln_final.param_ids());
        v.push(self.projection);
        v
    }
}
