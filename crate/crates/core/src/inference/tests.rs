use super::*;
use crate::data::SyntheticDatasetSpec;
use crate::label::LabelEncoderKind;
use crate::model::ModelConfig;
use crate::train::score;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model(kind: LabelEncoderKind) -> Model {
    let mut mc = ModelConfig::default();
    mc.label.kind = kind;
    mc.label.n_prefixes = 1;
    mc.label.k_attributes = 2;
    mc.label.l_tokens = 2;
    mc.video.blocks = 2;
    Model::new(mc).unwrap()
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn unit_f32(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

fn random_db(rng: &mut ChaCha8Rng, labels: Vec<String>, d: usize) -> VocabularyDb {
    let mut db = VocabularyDb::new(d);
    db.checkpoint_hash = Some("ab".repeat(32));
    for label in labels {
        db.entries.push(DbEntry {
            label,
            variant: EmbeddingVariant::LearnableLlm,
            vector: unit_f32(rng, d),
        });
    }
    db
}

#[test]
fn save_load_is_bit_exact_and_rejects_damage() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let db = random_db(&mut rng, strings(&["rock climbing", "café", "日本の滝"]), 8);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("v.db");
    save_db(&db, &p).unwrap();
    let back = load_db(&p).unwrap();
    assert_eq!(back, db);
    assert!(back.entries.iter().zip(&db.entries).all(|(a, b)| a.vector.iter().zip(&b.vector).all(|(x, y)| x.to_bits() == y.to_bits())));

    let bytes = db.to_bytes();
    for cut in 0..bytes.len() {
        assert!(VocabularyDb::from_bytes(&bytes[..cut]).is_err(), "prefix of {cut} bytes loaded");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(VocabularyDb::from_bytes(&extra).is_err());
    let mut v2 = bytes.clone();
    v2[4] = 2;
    assert!(matches!(VocabularyDb::from_bytes(&v2), Err(InferenceError::Version { found: 2, .. })));
}

/// Random label of 1 to 16 code points drawn across several scripts.
fn fuzz_label(rng: &mut ChaCha8Rng) -> String {
    const RANGES: [(u32, u32); 5] = [(0x20, 0x7e), (0xc0, 0x24f), (0x391, 0x3c9), (0x3040, 0x30ff), (0x1f300, 0x1f64f)];
    let n = rng.random_range(1..=16);
    (0..n)
        .map(|_| {
            let (lo, hi) = RANGES[rng.random_range(0..RANGES.len())];
            char::from_u32(rng.random_range(lo..=hi)).expect("ranges avoid surrogates")
        })
        .collect()
}

#[test]
fn thousand_fuzzed_unicode_labels_round_trip() {
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels = std::collections::BTreeSet::new();
        while labels.len() < 1000 {
            labels.insert(fuzz_label(&mut rng));
        }
        let db = random_db(&mut rng, labels.into_iter().collect(), 16);
        let back = VocabularyDb::from_bytes(&db.to_bytes()).unwrap();
        assert_eq!(back, db);
        assert_eq!(back.to_bytes(), db.to_bytes());
    }
}

#[test]
fn expansion_appends_and_is_order_independent() {
    let m = small_model(LabelEncoderKind::LearnableLlm);
    let p = Precision::F64;
    let empty = VocabularyDb::new(m.backbones.config.joint_dim);
    let a = expand_vocabulary(&empty, &strings(&["rock climbing", "surfing"]), &m, p).unwrap();
    assert_eq!(a.len(), 2);
    let same = expand_vocabulary(&a, &strings(&["surfing"]), &m, p).unwrap();
    assert_eq!(same, a);
    let b = expand_vocabulary(&a, &strings(&["surfing", "ice skating", "juggling"]), &m, p).unwrap();
    assert_eq!(b.len(), 4);
    assert_eq!(b.entries[..2], a.entries[..]);
    let all = expand_vocabulary(&empty, &strings(&["rock climbing", "surfing", "ice skating", "juggling"]), &m, p).unwrap();
    assert_eq!(all.to_bytes(), b.to_bytes());
}

#[test]
fn expansion_refuses_a_different_model() {
    let m = small_model(LabelEncoderKind::Classname);
    let db = expand_vocabulary(&VocabularyDb::new(m.backbones.config.joint_dim), &strings(&["surfing"]), &m, Precision::F64).unwrap();
    let mut other = small_model(LabelEncoderKind::Classname);
    let id = other.video.param_ids()[0];
    other.store.values_mut(id).unwrap().data_mut()[0] += 1.0;
    let err = expand_vocabulary(&db, &strings(&["juggling"]), &other, Precision::F64).unwrap_err();
    assert_eq!(err.to_string(), "vocabulary built with different model");
    assert!(matches!(InferenceSession::new(&other, db, Precision::F64), Err(InferenceError::ModelMismatch)));
}

#[test]
fn infer_matches_pairwise_scores_across_save_and_load() {
    let m = small_model(LabelEncoderKind::LearnableLlm);
    let ds = Dataset::synthetic(&SyntheticDatasetSpec::default(), 0).unwrap();
    let vocab = ds.split_vocabulary(Split::Train);
    let db = expand_vocabulary(&VocabularyDb::new(m.backbones.config.joint_dim), &vocab, &m, Precision::F64).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.db");
    save_db(&db, &path).unwrap();
    let loaded = load_db(&path).unwrap();
    let rec = &ds.records[0];
    let frames = ds.frames(rec).unwrap();
    let res = infer(&rec.video_id, &frames, &loaded, &m, Precision::F64, None).unwrap();
    let video = m.video.embed_video(&m.store, &m.backbones, Precision::F64, &rec.video_id, &frames, None).unwrap();
    let labels = m.label.embed_labels(&m.store, &m.backbones, Precision::F64, &vocab).unwrap();
    assert_eq!(res.scores.len(), vocab.len());
    for (got, l) in res.scores.iter().zip(&labels) {
        assert_eq!(got.label, l.label);
        assert!((got.score - score(&l.vector, &video.vector)).abs() < 1e-6);
        assert!((-1.0..=1.0).contains(&got.score));
    }
    let none = infer(&rec.video_id, &frames, &loaded, &m, Precision::F64, Some(1.5)).unwrap();
    assert_eq!(none.predicted, Some(vec![]));
}

#[test]
fn own_embedding_scores_one_and_ranks_first() {
    let m = small_model(LabelEncoderKind::Classname);
    let ds = Dataset::synthetic(&SyntheticDatasetSpec::default(), 0).unwrap();
    let rec = &ds.records[1];
    let frames = ds.frames(rec).unwrap();
    let mut db = expand_vocabulary(&VocabularyDb::new(32), &ds.split_vocabulary(Split::Train), &m, Precision::F64).unwrap();
    let v = m.video.embed_video(&m.store, &m.backbones, Precision::F64, &rec.video_id, &frames, None).unwrap();
    db.entries.push(DbEntry {
        label: "itself".into(),
        variant: EmbeddingVariant::Classname,
        vector: v.vector.iter().map(|&x| x as f32).collect(),
    });
    let session = InferenceSession::new(&m, db, Precision::F64).unwrap();
    let res = session.infer(&rec.video_id, &frames, Some(0.999), None).unwrap();
    let top = res.ranked()[0];
    assert_eq!(top.label, "itself");
    assert!((top.score - 1.0).abs() < 1e-6);
    assert_eq!(res.predicted, Some(vec!["itself".to_string()]));

    // Shared session, concurrent readers, identical answers.
    let cache = TapCache::new();
    let outs: Vec<InferenceResult> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..3).map(|_| s.spawn(|| session.infer(&rec.video_id, &frames, None, Some(&cache)).unwrap())).collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(outs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn empty_db_is_an_error() {
    let m = small_model(LabelEncoderKind::Classname);
    let frames = vec![Mat::zeros(16, 8)];
    assert!(matches!(infer("x", &frames, &VocabularyDb::new(32), &m, Precision::F64, None), Err(InferenceError::EmptyDb)));
}

#[test]
fn dual_context_entries_combine_into_one_score() {
    let m = small_model(LabelEncoderKind::Dualcoop);
    let db = expand_vocabulary(&VocabularyDb::new(32), &strings(&["surfing", "juggling"]), &m, Precision::F64).unwrap();
    assert_eq!(db.len(), 4);
    assert_eq!(db.labels(), vec!["surfing", "juggling"]);
    let scorer = LabelScorer::from_db(&db).unwrap();
    let v = db.entries[0].vector_f64();
    let got = scorer.score(&v);
    let neg = db.entries[1].vector_f64();
    assert!((got[0] - 0.5 * (dot(&v, &v) - dot(&neg, &v))).abs() < 1e-12);
}

#[test]
fn split_evaluation_pairs_every_video_with_every_label() {
    let m = small_model(LabelEncoderKind::Classname);
    let ds = Dataset::synthetic(&SyntheticDatasetSpec::default(), 0).unwrap();
    let set = evaluate_split(&m, &ds, Split::TestOpen, Precision::F64, None).unwrap();
    let n_videos = ds.split(Split::TestOpen).len();
    assert_eq!(set.pairs.len(), n_videos * ds.split_vocabulary(Split::TestOpen).len());
    let truths: usize = ds.split(Split::TestOpen).iter().map(|r| r.labels.len()).sum();
    assert_eq!(set.positives(), truths);
    assert_eq!(set.dataset, "test_open");
}
