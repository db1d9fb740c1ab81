//! Encoder-decoder language model with continuous (hidden-state feedback)
//! and greedy discrete decoding.
//!
//! Several sequences can be encoded and decoded together; each one only ever
//! attends to its own rows.

use std::rc::Rc;

use super::tokenizer::{Tokenizer, DECODER_START, EOT};
use super::{correlated_table, BackboneConfig, BackboneError};
use crate::nn::init::derive_seed;
use crate::nn::layers::{embedding_table, AttentionVars};
use crate::nn::{
    AttentionSpec, AttnBlock, AttnLayout, InitOpts, LayerNorm, Linear, Mat, Mlp, MultiHeadAttention, ParamId,
    ParamStore, Precision, Tape, TransformerBlock, Var,
};

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub mlp: Mlp,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, opts: InitOpts) -> Result<Self, BackboneError> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, opts)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), AttentionSpec::new(heads, d, true)?, false, opts)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, opts)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), AttentionSpec::new(heads, d, false)?, false, opts)?,
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d, opts)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, 4 * d, false, opts)?,
        })
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.ln1.param_ids();
        v.extend(self.self_attn.param_ids());
        v.extend(self.ln2.param_ids());
        v.extend(self.cross_attn.param_ids());
        v.extend(self.ln3.param_ids());
        v.extend(self.mlp.param_ids());
        v
    }
}

#[derive(Clone, Debug)]
pub struct ToyEncDecLlm {
    /// Shared input table and tied output head.
    pub token_embedding: ParamId,
    pub enc_positional: ParamId,
    pub dec_positional: ParamId,
    pub encoder: Vec<TransformerBlock>,
    pub enc_ln: LayerNorm,
    pub decoder: Vec<DecoderLayer>,
    pub dec_ln: LayerNorm,
    /// Added to the output logits; zero unless a caller overrides it.
    pub lm_bias: ParamId,
    pub width: usize,
    pub max_len: usize,
}

/// Encoder states of several sequences stacked row-wise.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub states: Var,
    /// `(first row, length)` of every sequence.
    pub ranges: Vec<(usize, usize)>,
}

struct CrossKv {
    k: Var,
    v: Var,
}

impl ToyEncDecLlm {
    pub fn new(
        store: &mut ParamStore,
        cfg: &BackboneConfig,
        tokenizer: &Tokenizer,
        groups: &[usize],
        opts: InitOpts,
    ) -> Result<Self, BackboneError> {
        let d = cfg.d_llm;
        let table = correlated_table(
            tokenizer.vocab_size(),
            d,
            groups,
            cfg.llm_synonym_corr,
            1.0,
            derive_seed(opts.seed, "llm.token_embedding"),
        );
        let token_embedding = store.add_in_group("llm.token_embedding", table, opts.trainable, opts.group)?;
        let enc_positional = embedding_table(store, "llm.enc_positional", cfg.llm_max_len, d, 0.5, opts)?;
        let dec_positional = embedding_table(store, "llm.dec_positional", cfg.llm_max_len, d, 0.5, opts)?;
        let spec = AttentionSpec::new(cfg.heads, d, false)?;
        let encoder = (0..cfg.llm_encoder_layers)
            .map(|l| TransformerBlock::new(store, &format!("llm.encoder{l}"), spec, 4, opts))
            .collect::<Result<Vec<_>, _>>()?;
        let enc_ln = LayerNorm::new(store, "llm.enc_ln", d, opts)?;
        let decoder = (0..cfg.llm_decoder_layers)
            .map(|l| DecoderLayer::new(store, &format!("llm.decoder{l}"), d, cfg.heads, opts))
            .collect::<Result<Vec<_>, _>>()?;
        let dec_ln = LayerNorm::new(store, "llm.dec_ln", d, opts)?;
        let lm_bias = store.add_in_group("llm.lm_bias", Mat::zeros(1, tokenizer.vocab_size()), opts.trainable, opts.group)?;
        Ok(Self {
            token_embedding,
            enc_positional,
            dec_positional,
            encoder,
            enc_ln,
            decoder,
            dec_ln,
            lm_bias,
            width: d,
            max_len: cfg.llm_max_len,
        })
    }

    fn embed(&self, tape: &Tape, store: &ParamStore, ids: &[u32]) -> Var {
        let table = tape.param(store, self.token_embedding);
        tape.gather_rows(table, Rc::new(ids.iter().map(|&i| i as usize).collect()))
    }

    /// Encodes `[prefix; template]` for each item. A prefix is a `1 × d_llm`
    /// row; items without one encode the template alone.
    pub fn encode_batch(&self, tape: &Tape, store: &ParamStore, items: &[(Option<Var>, &[u32])]) -> Result<EncodedBatch, BackboneError> {
        let pos = tape.param(store, self.enc_positional);
        let mut parts = Vec::with_capacity(items.len());
        let mut ranges = Vec::with_capacity(items.len());
        let mut offset = 0;
        for &(prefix, ids) in items {
            if let Some(p) = prefix {
                let (r, w) = tape.shape(p);
                if w != self.width || r != 1 {
                    return Err(BackboneError::WidthMismatch { expected: self.width, got: w });
                }
            }
            let n = usize::from(prefix.is_some()) + ids.len();
            if n > self.max_len || n == 0 {
                return Err(BackboneError::SequenceTooLong { len: n, max: self.max_len });
            }
            let x = match (prefix, ids.is_empty()) {
                (Some(p), true) => p,
                (Some(p), false) => tape.concat_rows(&[p, self.embed(tape, store, ids)]),
                (None, _) => self.embed(tape, store, ids),
            };
            parts.push(tape.add(x, tape.slice_rows(pos, 0, n)));
            ranges.push((offset, n));
            offset += n;
        }
        let mut h = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) };
        let layout = AttnLayout::Grouped(ranges.iter().map(|&(s, n)| (s..s + n).collect()).collect());
        for b in &self.encoder {
            h = b.forward_with_layout(tape, store, h, &layout)?;
        }
        Ok(EncodedBatch {
            states: self.enc_ln.forward(tape, store, h),
            ranges,
        })
    }

    /// `(1+M) × d_llm` encoder states with the prefix at position 0.
    pub fn llm_encode(&self, tape: &Tape, store: &ParamStore, prefix: Var, template_ids: &[u32]) -> Result<Var, BackboneError> {
        Ok(self.encode_batch(tape, store, &[(Some(prefix), template_ids)])?.states)
    }

    /// Encoder states of a plain token sequence.
    pub fn encode_tokens(&self, tape: &Tape, store: &ParamStore, ids: &[u32]) -> Result<Var, BackboneError> {
        Ok(self.encode_batch(tape, store, &[(None, ids)])?.states)
    }

    fn cross_kv(&self, tape: &Tape, store: &ParamStore, states: Var) -> Vec<(AttentionVars, AttentionVars, CrossKv)> {
        self.decoder
            .iter()
            .map(|l| {
                let sv = l.self_attn.vars(tape, store);
                let cv = l.cross_attn.vars(tape, store);
                let k = Linear::apply(tape, cv.wk, states);
                let v = Linear::apply(tape, cv.wv, states);
                (sv, cv, CrossKv { k, v })
            })
            .collect()
    }

    /// One decoder pass for the `n` current inputs (row `i` belongs to
    /// sequence `i`), extending the per-layer self-attention caches.
    #[allow(clippy::too_many_arguments)]
    fn decoder_step(
        &self,
        tape: &Tape,
        store: &ParamStore,
        x: Var,
        step: usize,
        enc: &EncodedBatch,
        layers: &[(AttentionVars, AttentionVars, CrossKv)],
        cache: &mut [(Option<Var>, Option<Var>)],
    ) -> Result<Var, BackboneError> {
        let n = enc.ranges.len();
        let self_layout = AttnLayout::Blocks(
            (0..n)
                .map(|i| AttnBlock {
                    queries: vec![i],
                    keys: (0..=step).map(|s| s * n + i).collect(),
                    mask: None,
                })
                .collect(),
        );
        let cross_layout = AttnLayout::Blocks(
            enc.ranges
                .iter()
                .enumerate()
                .map(|(i, &(s, len))| AttnBlock {
                    queries: vec![i],
                    keys: (s..s + len).collect(),
                    mask: None,
                })
                .collect(),
        );
        let mut x = x;
        for ((layer, (sv, cv, kv)), slot) in self.decoder.iter().zip(layers).zip(cache.iter_mut()) {
            let h = layer.ln1.forward(tape, store, x);
            let q = Linear::apply(tape, sv.wq, h);
            let k = Linear::apply(tape, sv.wk, h);
            let v = Linear::apply(tape, sv.wv, h);
            let ks = match slot.0 {
                Some(prev) => tape.concat_rows(&[prev, k]),
                None => k,
            };
            let vs = match slot.1 {
                Some(prev) => tape.concat_rows(&[prev, v]),
                None => v,
            };
            *slot = (Some(ks), Some(vs));
            let a = layer.self_attn.attend_projected(tape, sv, q, ks, vs, &self_layout)?;
            x = tape.add(x, a);
            let h = layer.ln2.forward(tape, store, x);
            let q = Linear::apply(tape, cv.wq, h);
            let a = layer.cross_attn.attend_projected(tape, cv, q, kv.k, kv.v, &cross_layout)?;
            x = tape.add(x, a);
            let h = layer.ln3.forward(tape, store, x);
            x = tape.add(x, layer.mlp.forward(tape, store, h));
        }
        if !tape.value(x).is_finite() {
            return Err(crate::nn::NnError::NonFinite("llm decoder".into()).into());
        }
        Ok(self.dec_ln.forward(tape, store, x))
    }

    /// Continuous decoding of every sequence in `enc`. Step 0 reads the
    /// `DECODER_START` embedding; every later step reads the previous output
    /// state. Returns one `steps × d_llm` node per sequence.
    pub fn decode_continuous_batch(
        &self,
        tape: &Tape,
        store: &ParamStore,
        enc: &EncodedBatch,
        steps: usize,
    ) -> Result<Vec<Var>, BackboneError> {
        if steps == 0 {
            return Err(BackboneError::ZeroSteps);
        }
        if steps > self.max_len {
            return Err(BackboneError::SequenceTooLong { len: steps, max: self.max_len });
        }
        let n = enc.ranges.len();
        let layers = self.cross_kv(tape, store, enc.states);
        let mut cache = vec![(None, None); self.decoder.len()];
        let pos = tape.param(store, self.dec_positional);
        let start = self.embed(tape, store, &vec![DECODER_START; n]);
        let mut input = start;
        let mut outs = Vec::with_capacity(steps);
        for step in 0..steps {
            let p = tape.gather_rows(pos, Rc::new(vec![step; n]));
            let x = tape.add(input, p);
            let h = self.decoder_step(tape, store, x, step, enc, &layers, &mut cache)?;
            outs.push(h);
            input = h;
        }
        let all = if outs.len() == 1 { outs[0] } else { tape.concat_rows(&outs) };
        Ok((0..n)
            .map(|i| tape.gather_rows(all, Rc::new((0..steps).map(|s| s * n + i).collect())))
            .collect())
    }

    /// `steps × d_llm` decoded states for a single sequence.
    pub fn llm_decode_continuous(&self, tape: &Tape, store: &ParamStore, states: Var, steps: usize) -> Result<Var, BackboneError> {
        let len = tape.shape(states).0;
        let enc = EncodedBatch {
            states,
            ranges: vec![(0, len)],
        };
        Ok(self.decode_continuous_batch(tape, store, &enc, steps)?.remove(0))
    }

    /// Decoder over a whole input sequence at once (no cache); row `t` equals
    /// the state produced at step `t` of incremental decoding.
    pub fn decoder_forward_full(&self, tape: &Tape, store: &ParamStore, inputs: Var, states: Var) -> Result<Var, BackboneError> {
        let t = tape.shape(inputs).0;
        let pos = tape.param(store, self.dec_positional);
        let mut x = tape.add(inputs, tape.slice_rows(pos, 0, t));
        for layer in &self.decoder {
            let h = layer.ln1.forward(tape, store, x);
            x = tape.add(x, layer.self_attn.forward(tape, store, h, h, &AttnLayout::Causal)?);
            let h = layer.ln2.forward(tape, store, x);
            x = tape.add(x, layer.cross_attn.forward(tape, store, h, states, &AttnLayout::Dense { mask: None })?);
            let h = layer.ln3.forward(tape, store, x);
            x = tape.add(x, layer.mlp.forward(tape, store, h));
        }
        Ok(self.dec_ln.forward(tape, store, x))
    }

    /// Greedy decoding; stops at `EOT` or after `max_steps` tokens.
    pub fn llm_decode_discrete(
        &self,
        store: &ParamStore,
        tokenizer: &Tokenizer,
        states: &Mat,
        max_steps: usize,
    ) -> Result<String, BackboneError> {
        let ids = self.decode_discrete_ids(store, states, max_steps)?;
        Ok(tokenizer.detokenize(&ids))
    }

    pub fn decode_discrete_ids(&self, store: &ParamStore, states: &Mat, max_steps: usize) -> Result<Vec<u32>, BackboneError> {
        if max_steps == 0 {
            return Err(BackboneError::ZeroSteps);
        }
        let tape = Tape::inference(Precision::F64);
        let sv = tape.constant(states.clone());
        let enc = EncodedBatch {
            states: sv,
            ranges: vec![(0, states.rows())],
        };
        let layers = self.cross_kv(&tape, store, sv);
        let mut cache = vec![(None, None); self.decoder.len()];
        let pos = tape.param(store, self.dec_positional);
        let table = tape.param(store, self.token_embedding);
        let bias = store.values(self.lm_bias);
        let mut token = DECODER_START;
        let mut out = Vec::new();
        for step in 0..max_steps.min(self.max_len) {
            let x = tape.add(self.embed(&tape, store, &[token]), tape.slice_rows(pos, step, 1));
            let h = self.decoder_step(&tape, store, x, step, &enc, &layers, &mut cache)?;
            let logits = tape.value(tape.matmul_t(h, table));
            let mut best = (f64::NEG_INFINITY, EOT);
            for (i, (&z, &b)) in logits.data().iter().zip(bias.data()).enumerate() {
                let z = z + b;
                if z > best.0 {
                    best = (z, i as u32);
                }
            }
            if best.1 == EOT {
                break;
            }
            out.push(best.1);
            token = best.1;
        }
        Ok(out)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.token_embedding, self.enc_positional, self.dec_positional];
        for b in &self.encoder {
            v.extend(b.param_ids());
        }
        v.extend(self.enc_ln.param_ids());
        for l in &self.decoder {
            v.extend(l.param_ids());
        }
        v.extend(self.dec_ln.param_ids());
        v.push(self.lm_bias);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::Backbones;
    use crate::nn::{finite_diff_grad_check, seeded_normal};

    fn setup() -> (ParamStore, Backbones) {
        let mut store = ParamStore::new();
        let bb = Backbones::from_wordbank(&mut store, &BackboneConfig::default()).unwrap();
        (store, bb)
    }

    fn template(bb: &Backbones) -> Vec<u32> {
        bb.tokenizer.tokenize("q what are useful features for distinguishing a water slide in a photo")
    }

    #[test]
    fn encoder_output_length_is_one_plus_template() {
        let (store, bb) = setup();
        let tape = Tape::inference(Precision::F64);
        let ids = template(&bb);
        let p = tape.constant(seeded_normal(1, 32, 1, 1.0));
        let s = bb.llm.llm_encode(&tape, &store, p, &ids).unwrap();
        assert_eq!(tape.shape(s), (ids.len() + 1, 32));
        let p2 = tape.constant(seeded_normal(1, 32, 2, 1.0));
        let s2 = bb.llm.llm_encode(&tape, &store, p2, &ids).unwrap();
        assert!(!tape.value(s).bit_eq(&tape.value(s2)));
    }

    #[test]
    fn prefix_width_is_checked() {
        let (store, bb) = setup();
        let tape = Tape::inference(Precision::F64);
        let p = tape.constant(Mat::zeros(1, 31));
        assert!(matches!(
            bb.llm.llm_encode(&tape, &store, p, &[5]),
            Err(BackboneError::WidthMismatch { .. })
        ));
    }

    #[test]
    fn zero_steps_fail_and_one_step_has_one_row() {
        let (store, bb) = setup();
        let tape = Tape::inference(Precision::F64);
        let p = tape.constant(seeded_normal(1, 32, 1, 1.0));
        let s = bb.llm.llm_encode(&tape, &store, p, &template(&bb)).unwrap();
        assert!(matches!(bb.llm.llm_decode_continuous(&tape, &store, s, 0), Err(BackboneError::ZeroSteps)));
        let o = bb.llm.llm_decode_continuous(&tape, &store, s, 1).unwrap();
        assert_eq!(tape.shape(o), (1, 32));
        let o = bb.llm.llm_decode_continuous(&tape, &store, s, 25).unwrap();
        assert_eq!(tape.shape(o), (25, 32));
    }

    #[test]
    fn cached_decoding_matches_full_recomputation() {
        let (store, bb) = setup();
        let tape = Tape::inference(Precision::F64);
        let p = tape.constant(seeded_normal(1, 32, 1, 1.0));
        let s = bb.llm.llm_encode(&tape, &store, p, &template(&bb)).unwrap();
        let steps = 6;
        let out = tape.value(bb.llm.llm_decode_continuous(&tape, &store, s, steps).unwrap());
        // Inputs are DECODER_START followed by the first steps-1 outputs.
        let start = bb.llm.embed(&tape, &store, &[DECODER_START]);
        let prev = tape.constant(Mat::from_vec(steps - 1, 32, out.data()[..(steps - 1) * 32].to_vec()));
        let inputs = tape.concat_rows(&[start, prev]);
        let full = tape.value(bb.llm.decoder_forward_full(&tape, &store, inputs, s).unwrap());
        for (a, b) in out.data().iter().zip(full.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn batched_decoding_matches_individual() {
        let (store, bb) = setup();
        let tape = Tape::inference(Precision::F64);
        let t1 = template(&bb);
        let t2 = bb.tokenizer.tokenize("q what are useful features for distinguishing a red car");
        let p1 = tape.constant(seeded_normal(1, 32, 1, 1.0));
        let p2 = tape.constant(seeded_normal(1, 32, 2, 1.0));
        let enc = bb.llm.encode_batch(&tape, &store, &[(Some(p1), &t1), (Some(p2), &t2)]).unwrap();
        let outs = bb.llm.decode_continuous_batch(&tape, &store, &enc, 4).unwrap();
        for (p, t, o) in [(p1, &t1, outs[0]), (p2, &t2, outs[1])] {
            let s = bb.llm.llm_encode(&tape, &store, p, t).unwrap();
            let single = bb.llm.llm_decode_continuous(&tape, &store, s, 4).unwrap();
            for (a, b) in tape.value(o).data().iter().zip(tape.value(single).data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn forced_eot_gives_empty_text() {
        let (mut store, bb) = setup();
        let tape = Tape::inference(Precision::F64);
        let p = tape.constant(seeded_normal(1, 32, 1, 1.0));
        let s = tape.value(bb.llm.llm_encode(&tape, &store, p, &template(&bb)).unwrap());
        let mut bias = Mat::zeros(1, bb.tokenizer.vocab_size());
        bias.data_mut()[EOT as usize] = 1e6;
        store.overwrite(bb.llm.lm_bias, bias).unwrap();
        assert_eq!(bb.llm.llm_decode_discrete(&store, &bb.tokenizer, &s, 10).unwrap(), "");
    }

    #[test]
    fn discrete_decoding_is_deterministic() {
        let (store, bb) = setup();
        let tape = Tape::inference(Precision::F64);
        let p = tape.constant(seeded_normal(1, 32, 1, 1.0));
        let s = tape.value(bb.llm.llm_encode(&tape, &store, p, &template(&bb)).unwrap());
        let a = bb.llm.llm_decode_discrete(&store, &bb.tokenizer, &s, 12).unwrap();
        let b = bb.llm.llm_decode_discrete(&store, &bb.tokenizer, &s, 12).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prefix_gradient_through_encoder_and_decoder() {
        let (mut store, bb) = setup();
        let prefix = store.add("probe.prefix", seeded_normal(1, 32, 3, 1.0), true).unwrap();
        let ids = template(&bb);
        let target = seeded_normal(1, 32, 8, 1.0);
        let enc_loss = |t: &Tape| -> Result<Var, BackboneError> {
            let s = bb.llm.llm_encode(t, &store, t.param(&store, prefix), &ids)?;
            let last = t.slice_rows(s, 3, 1);
            Ok(t.sum_all(t.mul(last, t.constant(target.clone()))))
        };
        let r = finite_diff_grad_check(&store, prefix, 1e-5, &[0, 5, 17, 31], enc_loss).unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
        let dec_loss = |t: &Tape| -> Result<Var, BackboneError> {
            let s = bb.llm.llm_encode(t, &store, t.param(&store, prefix), &ids)?;
            let o = bb.llm.llm_decode_continuous(t, &store, s, 25)?;
            let last = t.slice_rows(o, 24, 1);
            Ok(t.sum_all(t.mul(last, t.constant(target.clone()))))
        };
        let r = finite_diff_grad_check(&store, prefix, 1e-5, &[0, 5, 17, 31], dec_loss).unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }
}
