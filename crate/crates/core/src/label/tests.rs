use super::*;
use crate::backbones::tokenizer::EOT;
use crate::backbones::BackboneConfig;
use crate::nn::mat::{dot, l2_norm};
use crate::nn::{finite_diff_grad_check, top_gradient_coords};

fn setup(kind: LabelEncoderKind, n: usize, k: usize, l: usize) -> (ParamStore, Backbones, LabelEncoder) {
    let mut store = ParamStore::new();
    let bb = Backbones::from_wordbank(&mut store, &BackboneConfig::default()).unwrap();
    let cfg = LabelEncoderConfig {
        kind,
        n_prefixes: n,
        k_attributes: k,
        l_tokens: l,
        ..LabelEncoderConfig::default()
    };
    let enc = LabelEncoder::new(&mut store, &bb, &cfg, 0).unwrap();
    (store, bb, enc)
}

fn labels(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn embed(store: &ParamStore, bb: &Backbones, enc: &LabelEncoder, xs: &[&str]) -> Vec<Vec<f64>> {
    enc.embed_labels(store, bb, Precision::F64, &labels(xs))
        .unwrap()
        .into_iter()
        .map(|e| e.vector)
        .collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn template_renders_label_twice() {
    let t = render(LLM_TEMPLATE, "lion");
    assert!(t.contains("distinguishing a lion in a photo"));
    assert!(t.contains("tell about a lion in a photo: 1."));
    let tok = crate::backbones::Tokenizer::from_wordbank();
    assert_eq!(build_template(&tok, "red car").len(), build_template(&tok, "small dog").len());
    assert_eq!(build_template(&tok, "Red Car"), build_template(&tok, "red car"));
}

#[test]
fn soft_attributes_are_chunked_and_deterministic() {
    let (store, bb, enc) = setup(LabelEncoderKind::LearnableLlm, 2, 5, 5);
    let tape = Tape::inference(Precision::F64);
    let a = enc.generate_soft_attributes(&tape, &store, &bb, 1, "water slide").unwrap();
    let b = enc.generate_soft_attributes(&tape, &store, &bb, 1, "water slide").unwrap();
    assert_eq!(a.len(), 5);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(tape.shape(*x), (5, bb.llm.width));
        assert!(tape.value(*x).bit_eq(&tape.value(*y)));
    }
    assert!(enc.generate_soft_attributes(&tape, &store, &bb, 2, "water slide").is_err());
}

#[test]
fn mismatched_decode_steps_fail_at_construction() {
    let mut store = ParamStore::new();
    let bb = Backbones::from_wordbank(&mut store, &BackboneConfig::default()).unwrap();
    let cfg = LabelEncoderConfig {
        decode_steps: Some(24),
        ..LabelEncoderConfig::default()
    };
    assert!(matches!(LabelEncoder::new(&mut store, &bb, &cfg, 0), Err(LabelError::Config(_))));
}

#[test]
fn every_variant_returns_unit_vectors() {
    for kind in [
        LabelEncoderKind::LearnableLlm,
        LabelEncoderKind::FixedLlm,
        LabelEncoderKind::Coop,
        LabelEncoderKind::Dualcoop,
        LabelEncoderKind::Classname,
        LabelEncoderKind::Templates,
    ] {
        let (store, bb, enc) = setup(kind, 2, 2, 3);
        let vs = embed(&store, &bb, &enc, &["red car", "aqua chute"]);
        let expect = if kind == LabelEncoderKind::Dualcoop { 4 } else { 2 };
        assert_eq!(vs.len(), expect, "{kind:?}");
        for v in vs {
            assert!((l2_norm(&v) - 1.0).abs() < 1e-5, "{kind:?}");
        }
    }
}

#[test]
fn single_attribute_is_its_own_embedding() {
    let (store, bb, enc) = setup(LabelEncoderKind::LearnableLlm, 1, 1, 1);
    let tape = Tape::inference(Precision::F64);
    let attrs = enc.generate_soft_attributes(&tape, &store, &bb, 0, "red car").unwrap();
    let pt = enc.prompt_transformer.as_ref().unwrap();
    let soft = pt.forward(&tape, &store, attrs[0]).unwrap();
    let f = bb.text.clip_encode_text_soft(&tape, &store, soft, &bb.tokenizer.tokenize("red car")).unwrap();
    let v = embed(&store, &bb, &enc, &["red car"]);
    assert!(close(&v[0], tape.value(f).data(), 1e-12));
}

#[test]
fn table_row_passthrough_matches_text_encoding() {
    let (store, bb, enc) = setup(LabelEncoderKind::LearnableLlm, 2, 2, 3);
    let words = bb.tokenizer.encode_words("a video of");
    let rows = bb.text.token_rows(&store, &words);
    let tape = Tape::inference(Precision::F64);
    let passthrough = |t: &Tape, x: Var| -> Result<Var, LabelError> {
        let blocks = t.shape(x).0 / 3;
        let all: Vec<Var> = (0..blocks).map(|_| t.constant(rows.clone())).collect();
        Ok(t.concat_rows(&all))
    };
    let got = enc
        .encode_learnable(&tape, &store, &bb, &labels(&["red car"]), Some(&passthrough))
        .unwrap();
    let mut ids = words.clone();
    ids.extend(bb.tokenizer.tokenize("red car"));
    let want = bb.text.clip_encode_text(&tape, &store, &ids).unwrap();
    assert!(close(tape.value(got).data(), tape.value(want).data(), 1e-12));
}

#[test]
fn learnable_gradients_pass_finite_difference_checks() {
    let (store, bb, enc) = setup(LabelEncoderKind::LearnableLlm, 2, 2, 2);
    let target = seeded_normal(2, bb.text.joint_dim, 5, 1.0);
    let labs = labels(&["water slide", "red car"]);
    let loss = |t: &Tape| -> Result<Var, LabelError> {
        let f = enc.encode_labels(t, &store, &bb, &labs)?;
        Ok(t.sum_all(t.mul(f.pos, t.constant(target.clone()))))
    };
    let pt = enc.prompt_transformer.as_ref().unwrap();
    for id in [enc.prefixes.unwrap(), pt.lift.weight, pt.blocks[1].attn.wq.weight] {
        let coords: Vec<usize> = top_gradient_coords(&store, id, 3, loss).unwrap();
        let r = finite_diff_grad_check(&store, id, 1e-5, &coords, loss).unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }
}

#[test]
fn gradients_reach_only_the_variant_parameters() {
    for kind in [
        LabelEncoderKind::LearnableLlm,
        LabelEncoderKind::Coop,
        LabelEncoderKind::Dualcoop,
        LabelEncoderKind::Classname,
        LabelEncoderKind::Templates,
        LabelEncoderKind::FixedLlm,
    ] {
        let (store, bb, enc) = setup(kind, 2, 2, 2);
        let tape = Tape::new(Precision::F64);
        let f = enc.encode_labels(&tape, &store, &bb, &labels(&["red car"])).unwrap();
        let mut total = tape.sum_all(f.pos);
        if let Some(n) = f.neg {
            total = tape.add(total, tape.sum_all(n));
        }
        let g = tape.backward(total).unwrap();
        let mut got: Vec<ParamId> = g.params().map(|(id, _)| id).collect();
        got.sort();
        let mut want = enc.param_ids();
        want.sort();
        assert_eq!(got, want, "{kind:?}");
    }
}

#[test]
fn fixed_variant_falls_back_to_classname_on_empty_output() {
    let (mut store, bb, enc) = setup(LabelEncoderKind::FixedLlm, 1, 1, 1);
    let mut bias = Mat::zeros(1, bb.tokenizer.vocab_size());
    bias.data_mut()[EOT as usize] = 1e6;
    store.overwrite(bb.llm.lm_bias, bias).unwrap();
    assert_eq!(enc.decode_fixed_text(&store, &bb, "red car").unwrap(), "");
    let fixed = embed(&store, &bb, &enc, &["red car"]);
    let (_, _, cls) = setup(LabelEncoderKind::Classname, 1, 1, 1);
    let want = embed(&store, &bb, &cls, &["red car"]);
    assert_eq!(fixed, want);
}

#[test]
fn fixed_prompts_use_attribute_form() {
    let (store, bb, enc) = setup(LabelEncoderKind::FixedLlm, 1, 1, 1);
    let prompts = enc.prompt_strings(&store, &bb, "red car").unwrap();
    assert_eq!(prompts.last().unwrap(), "a video of red car");
    for p in &prompts[..prompts.len() - 1] {
        assert!(p.starts_with("red car, which has "), "{p}");
    }
}

#[test]
fn single_template_equals_classname_and_order_is_irrelevant() {
    let (store, bb, _) = setup(LabelEncoderKind::Classname, 1, 1, 1);
    let mk = |templates: Vec<String>| {
        let cfg = LabelEncoderConfig {
            kind: LabelEncoderKind::Templates,
            templates,
            ..LabelEncoderConfig::default()
        };
        let mut s2 = store.clone();
        let e = LabelEncoder::new(&mut s2, &bb, &cfg, 0).unwrap();
        let tape = Tape::inference(Precision::F64);
        let f = e.encode_labels(&tape, &store, &bb, &labels(&["small dog"])).unwrap();
        tape.value(f.pos).data().to_vec()
    };
    let cls_cfg = LabelEncoderConfig {
        kind: LabelEncoderKind::Classname,
        ..LabelEncoderConfig::default()
    };
    let mut s2 = store.clone();
    let cls = LabelEncoder::new(&mut s2, &bb, &cls_cfg, 0).unwrap();
    let tape = Tape::inference(Precision::F64);
    let want = tape.value(cls.encode_labels(&tape, &store, &bb, &labels(&["small dog"])).unwrap().pos);
    assert_eq!(mk(vec![CLASSNAME_TEMPLATE.to_string()]), want.data());
    let mut ts = LabelEncoderConfig::default().templates;
    assert_eq!(ts.len(), 7);
    let a = mk(ts.clone());
    ts.reverse();
    ts.swap(0, 3);
    assert_eq!(a, mk(ts));
}

#[test]
fn coop_initialized_from_classname_rows_matches_classname() {
    let (store, bb, coop) = setup(LabelEncoderKind::Coop, 1, 1, 1);
    let (_, _, cls) = setup(LabelEncoderKind::Classname, 1, 1, 1);
    let a = embed(&store, &bb, &coop, &["black cat", "blue sky"]);
    let b = embed(&store, &bb, &cls, &["black cat", "blue sky"]);
    for (x, y) in a.iter().zip(&b) {
        assert!(close(x, y, 1e-12));
    }
}

#[test]
fn coop_context_is_shared_and_receives_gradient() {
    let (store, bb, enc) = setup(LabelEncoderKind::Coop, 1, 1, 1);
    let tape = Tape::new(Precision::F64);
    let f = enc.encode_labels(&tape, &store, &bb, &labels(&["black cat", "blue sky"])).unwrap();
    // Separate the two labels: push their similarity down.
    let sim = tape.matmul_t(tape.slice_rows(f.pos, 0, 1), tape.slice_rows(f.pos, 1, 1));
    let g = tape.backward(tape.sum_all(sim)).unwrap();
    let grads: Vec<_> = g.params().collect();
    assert_eq!(grads.len(), 1);
    assert_eq!(grads[0].0, enc.context.unwrap());
    assert!(grads[0].1.frobenius_sq() > 0.0);
}

#[test]
fn dualcoop_probability_properties() {
    assert_eq!(dualcoop_probability(0.3, 0.3, 0.05), 0.5);
    assert!(dualcoop_probability(0.4, 0.3, 0.05) > 0.5);
    assert!(dualcoop_probability(0.4, 0.3, 1e-6) > 1.0 - 1e-12);
    let (store, bb, enc) = setup(LabelEncoderKind::Dualcoop, 1, 1, 1);
    let v = embed(&store, &bb, &enc, &["red car"]);
    let fv = crate::nn::mat::normalized(&seeded_normal(1, bb.text.joint_dim, 3, 1.0).into_vec());
    assert_eq!(dualcoop_probability(dot(&v[0], &fv), dot(&v[1], &fv), 0.05), 0.5);
}

#[test]
fn encoding_is_counted_per_label() {
    let (store, bb, enc) = setup(LabelEncoderKind::Classname, 1, 1, 1);
    embed(&store, &bb, &enc, &["red car", "blue sky", "black cat"]);
    assert_eq!(enc.encode_calls(), 3);
}

#[test]
fn empty_labels_and_unknown_variants_are_rejected() {
    let (store, bb, enc) = setup(LabelEncoderKind::Classname, 1, 1, 1);
    assert!(matches!(
        enc.embed_labels(&store, &bb, Precision::F64, &labels(&[" "])),
        Err(LabelError::EmptyLabel)
    ));
    assert!("bogus".parse::<LabelEncoderKind>().is_err());
    assert!(parse_templates("no placeholder").is_err());
}
