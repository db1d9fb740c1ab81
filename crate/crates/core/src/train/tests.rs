use super::*;
use crate::data::SyntheticDatasetSpec;
use crate::model::ModelConfig;
use rand::Rng;

fn small_config() -> ModelConfig {
    let mut mc = ModelConfig::default();
    mc.label.n_prefixes = 2;
    mc.label.k_attributes = 3;
    mc.label.l_tokens = 3;
    mc.video.blocks = 2;
    mc
}

fn dataset() -> Dataset {
    Dataset::synthetic(&SyntheticDatasetSpec::default(), 0).unwrap()
}

fn trainer<'a>(ds: &'a Dataset, mc: ModelConfig, cfg: TrainConfig) -> Trainer<'a> {
    Trainer::new(Model::new(mc).unwrap(), ds, cfg).unwrap()
}

fn bits(m: &Mat) -> Vec<u64> {
    m.data().iter().map(|x| x.to_bits()).collect()
}

#[test]
fn desk_defaults() {
    let c = TrainConfig::default();
    assert_eq!((c.steps, c.warmup_steps, c.base_lr), (2000, 100, 3e-4));
    assert_eq!(c.loss.temperature, 0.05);
    assert_eq!(c.loss.negative_weight, NegativeWeight::Fixed(1.0));
}

#[test]
fn five_hundred_batches_keep_the_class_budget() {
    let ds = dataset();
    let tr = trainer(&ds, small_config(), TrainConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..500 {
        // 16 training labels allow B up to 4.
        let b = 1 + i % 4;
        let batch = build_batch(&tr.train_labels, tr.vocabulary.len(), b, &mut rng).unwrap();
        assert_eq!(batch.pool.len(), 4 * b);
        assert!(batch.pooled_positives.is_disjoint(&batch.sampled_negatives));
        let pool: std::collections::BTreeSet<usize> = batch.pool.iter().copied().collect();
        assert_eq!(pool.len(), 4 * b);
        let mut vids = batch.videos.clone();
        vids.sort();
        vids.dedup();
        assert_eq!(vids.len(), b);
        for v in 0..b {
            let neg = batch.negatives(v);
            assert!(neg.is_disjoint(&batch.positives[v]));
            let union: std::collections::BTreeSet<usize> = neg.union(&batch.positives[v]).copied().collect();
            assert_eq!(union, pool);
        }
    }
}

fn naive_bce(s: f64, t: f64, tau: f64, w: f64) -> f64 {
    let p = 1.0 / (1.0 + (-s / tau).exp());
    -(t * p.ln() + w * (1.0 - t) * (1.0 - p).ln())
}

#[test]
fn stabilized_loss_matches_naive_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut compared = 0;
    for _ in 0..10_000 {
        let n = rng.random_range(1..8);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let tau = rng.random_range(0.05..1.0);
        let w = rng.random_range(0.1..4.0);
        let naive: f64 = s.iter().zip(&t).map(|(&s, &t)| naive_bce(s, t, tau, w)).sum();
        if !naive.is_finite() {
            continue;
        }
        compared += 1;
        let stable = bce_loss(&s, &t, tau, w);
        assert!((stable - naive).abs() <= 1e-6 * naive.abs().max(f64::MIN_POSITIVE), "{s:?} {t:?} {tau} {w}: {stable} vs {naive}");
    }
    assert!(compared > 9_000);
    // s/τ = 30: no overflow on either side.
    assert!(bce_loss(&[1.5], &[1.0], 0.05, 1.0) < 1e-12);
    let neg = bce_loss(&[1.5], &[0.0], 0.05, 1.0);
    assert!((neg - 30.0).abs() < 1e-9);
}

#[test]
fn loss_gradient_signs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for kind in [LossKind::MultilabelBce, LossKind::SingleLabelCe] {
        for _ in 0..50 {
            let classes = 8;
            let scores: Vec<f64> = (0..2 * classes).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut targets = vec![0.0; 2 * classes];
            for r in 0..2 {
                targets[r * classes + rng.random_range(0..classes)] = 1.0;
            }
            let tape = Tape::new(Precision::F64);
            let s = tape.leaf(Mat::from_vec(2, classes, scores), true);
            let z = tape.scale(s, 1.0 / 0.05);
            let cfg = LossConfig { kind, ..Default::default() };
            let loss = loss_on_tape(&tape, z, &targets, &cfg).unwrap();
            let g = tape.backward(loss).unwrap();
            for (gi, t) in g.wrt(s).unwrap().data().iter().zip(&targets) {
                if *t > 0.5 {
                    assert!(*gi < 0.0, "positive pair gradient {gi}");
                } else {
                    assert!(*gi > 0.0, "negative pair gradient {gi}");
                }
            }
        }
    }
}

#[test]
fn each_pool_label_is_encoded_once_per_step() {
    let ds = dataset();
    let mut tr = trainer(&ds, small_config(), TrainConfig::default());
    for step in 0..3 {
        let before = tr.model.label.encode_calls();
        let tape = Tape::new(Precision::F64);
        let (batch, _) = tr.forward_loss(&tape, step).unwrap();
        assert_eq!(tr.model.label.encode_calls() - before, batch.pool.len());
        assert_eq!(batch.pool.len(), class_budget(tr.config.batch_size));
    }
}

fn changed_params(before: &[Vec<u64>], model: &Model) -> Vec<crate::nn::ParamId> {
    model.store.iter().filter(|(id, p)| bits(&p.values) != before[id.index()]).map(|(id, _)| id).collect()
}

#[test]
fn only_the_trainable_set_changes() {
    let ds = dataset();
    for mc in [small_config(), small_config().vifi_clip()] {
        let mut tr = trainer(&ds, mc, TrainConfig::default());
        let before: Vec<Vec<u64>> = tr.model.store.iter().map(|(_, p)| bits(&p.values)).collect();
        for _ in 0..3 {
            tr.train_step().unwrap();
        }
        let mut trainable = tr.model.trainable_ids();
        trainable.sort_by_key(|id| id.index());
        assert!(!trainable.is_empty());
        let changed = changed_params(&before, &tr.model);
        let name = |id: &crate::nn::ParamId| tr.model.store.get(*id).name.clone();
        let extra: Vec<String> = changed.iter().filter(|id| !trainable.contains(id)).map(name).collect();
        let still: Vec<String> = trainable.iter().filter(|id| !changed.contains(id)).map(name).collect();
        assert!(extra.is_empty() && still.is_empty(), "changed but frozen {extra:?}; trainable but unchanged {still:?}");
        assert!(tr.model.store.frozen_violations().is_empty());
    }
}

#[test]
fn same_seed_gives_identical_loss_curves() {
    let ds = dataset();
    let run = || {
        let mut tr = trainer(&ds, small_config(), TrainConfig::default());
        let losses: Vec<u64> = (0..4).map(|_| tr.train_step().unwrap().loss.to_bits()).collect();
        (losses, crate::nn::checkpoint::store_hash(&tr.model.store))
    };
    assert_eq!(run(), run());
    let mut other = trainer(&ds, small_config(), TrainConfig { seed: 1, ..Default::default() });
    let (a, _) = run();
    assert_ne!(other.train_step().unwrap().loss.to_bits(), a[0]);
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_good() {
    let ds = dataset();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        steps: 2,
        eval_every: 1,
        checkpoint_every: 1,
        ..Default::default()
    };
    let mut tr = trainer(&ds, small_config(), cfg);
    let recs = tr.run(Some(dir.path()), None).unwrap();
    assert_eq!(recs.len(), 2);
    let good = crate::nn::checkpoint::store_hash(&tr.model.store);
    let id = tr.model.trainable_ids()[0];
    tr.model.store.values_mut(id).unwrap().data_mut()[0] = f64::NAN;
    tr.config.steps = 4;
    match tr.run(Some(dir.path()), None) {
        Err(TrainError::NonFiniteLoss { step, last_good: Some(p) }) => {
            assert_eq!(step, 2);
            assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(dir.path().join("checkpoints/step_2.ckpt")).unwrap());
            let mut fresh = Model::new(small_config()).unwrap();
            crate::nn::checkpoint::load_store(&mut fresh.store, &p).unwrap();
            assert_eq!(crate::nn::checkpoint::store_hash(&fresh.store), good);
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
    assert_eq!(tr.step(), 2);
    let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn checkpoint_round_trip_restores_every_parameter() {
    let ds = dataset();
    let dir = tempfile::tempdir().unwrap();
    let mut tr = trainer(&ds, small_config(), TrainConfig::default());
    tr.train_step().unwrap();
    tr.train_step().unwrap();
    let path = dir.path().join("m.ckpt");
    crate::nn::checkpoint::save_store(&tr.model.store, &path).unwrap();
    let mut fresh = Model::new(small_config()).unwrap();
    assert_ne!(crate::nn::checkpoint::store_hash(&fresh.store), crate::nn::checkpoint::store_hash(&tr.model.store));
    crate::nn::checkpoint::load_store(&mut fresh.store, &path).unwrap();
    for ((_, a), (_, b)) in fresh.store.iter().zip(tr.model.store.iter()) {
        assert_eq!(a.name, b.name);
        // Checkpoints hold f32 values.
        let want: Vec<u64> = b.values.data().iter().map(|&x| (x as f32 as f64).to_bits()).collect();
        assert_eq!(bits(&a.values), want);
    }
}
