use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HAND_SCORES: [f64; 4] = [0.9, 0.8, 0.3, 0.1];
const HAND_TRUTHS: [bool; 4] = [true, false, true, false];

fn hand() -> Vec<(f64, bool)> {
    HAND_SCORES.iter().copied().zip(HAND_TRUTHS).collect()
}

/// Confusion counts at `thr` by direct enumeration.
fn confusion(pairs: &[(f64, bool)], thr: f64) -> (usize, usize, usize) {
    let mut c = (0, 0, 0);
    for &(s, t) in pairs {
        match (s >= thr, t) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            _ => {}
        }
    }
    c
}

/// AP by enumerating every distinct score as a threshold, highest first.
fn oracle_aupr(pairs: &[(f64, bool)]) -> f64 {
    let mut thr: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    thr.sort_by(|a, b| b.total_cmp(a));
    thr.dedup();
    let total = pairs.iter().filter(|p| p.1).count() as f64;
    let (mut prev, mut area) = (0.0, 0.0);
    for t in thr {
        let (tp, fp, _) = confusion(pairs, t);
        let r = tp as f64 / total;
        area += (r - prev) * (tp as f64 / (tp + fp) as f64);
        prev = r;
    }
    area
}

fn oracle_f1(pairs: &[(f64, bool)], thr: f64) -> f64 {
    let (tp, fp, fn_) = confusion(pairs, thr);
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Peak over every score, every midpoint and one point past the maximum.
fn oracle_peak(pairs: &[(f64, bool)]) -> f64 {
    let mut cands: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    for a in pairs {
        for b in pairs {
            cands.push(0.5 * (a.0 + b.0));
        }
    }
    cands.push(f64::INFINITY);
    cands.iter().map(|&t| oracle_f1(pairs, t)).fold(0.0, f64::max)
}

fn random_instance(rng: &mut ChaCha8Rng) -> Vec<(f64, bool)> {
    let n = rng.random_range(1..=200);
    let coarse = rng.random_bool(0.3);
    let mut v: Vec<(f64, bool)> = (0..n)
        .map(|_| {
            let s = if coarse { rng.random_range(0..8) as f64 / 8.0 } else { rng.random::<f64>() * 2.0 - 1.0 };
            (s, rng.random_bool(0.3))
        })
        .collect();
    if !v.iter().any(|p| p.1) {
        v[0].1 = true;
    }
    v
}

#[test]
fn hand_example_curve_points() {
    let c = pr_curve(&hand()).unwrap();
    let pts: Vec<(f64, f64)> = c.points.iter().map(|p| (p.recall, p.precision)).collect();
    assert!(pts.contains(&(0.5, 1.0)));
    assert!(pts.iter().any(|&(r, p)| r == 1.0 && (p - 2.0 / 3.0).abs() < 1e-15));
    assert!((aupr(&c) - 0.833_333_333_333).abs() < 1e-9);
}

#[test]
fn hand_example_f1() {
    let f = f1_sweep(&hand(), &[0.25, 0.5, 0.85]);
    assert!((f[0] - 0.8).abs() < 1e-12);
    assert!((f[1] - 0.5).abs() < 1e-12);
    assert!((f[2] - 2.0 / 3.0).abs() < 1e-12);
    let (peak, thr) = peak_f1(&hand()).unwrap();
    assert!((peak - 0.8).abs() < 1e-9);
    assert!(thr > 0.1 && thr <= 0.3, "{thr}");
}

#[test]
fn simple_cases() {
    let perfect = vec![(0.9, true), (0.7, true), (0.2, false), (0.1, false)];
    let c = pr_curve(&perfect).unwrap();
    assert!(c.points.iter().filter(|p| p.recall > 0.0 && p.recall <= 1.0 && p.threshold >= 0.7).all(|p| p.precision == 1.0));
    assert_eq!(aupr(&c), 1.0);

    let tied = vec![(0.5, true), (0.5, false), (0.5, false), (0.5, false)];
    let c = pr_curve(&tied).unwrap();
    assert_eq!(c.points.len(), 1);
    assert_eq!((c.points[0].recall, c.points[0].precision), (1.0, 0.25));

    assert!(matches!(pr_curve(&[(0.1, false)]), Err(MetricsError::NoPositives)));
    assert!(matches!(peak_f1(&[(0.1, false)]), Err(MetricsError::NoPositives)));
    assert!(matches!(pr_curve(&[(f64::NAN, true)]), Err(MetricsError::NonFinite(_))));

    // Below every score all records are predicted positive; above, none.
    let h = hand();
    let prev = 0.5;
    assert!((f1_sweep(&h, &[0.0])[0] - 2.0 * prev / (1.0 + prev)).abs() < 1e-12);
    assert_eq!(f1_sweep(&h, &[0.95])[0], 0.0);
}

#[test]
fn grid_holds_scores_and_midpoints() {
    assert_eq!(threshold_grid([0.3, 0.1, 0.3, 0.2]), vec![0.1, 0.15000000000000002, 0.2, 0.25, 0.3]);
    assert!(threshold_grid(std::iter::empty()).is_empty());
}

#[test]
fn oracle_equivalence_on_1000_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let inst = random_instance(&mut rng);
        assert_eq!(aupr_of(&inst).unwrap(), oracle_aupr(&inst));
        assert_eq!(peak_f1(&inst).unwrap().0, oracle_peak(&inst));
    }
}

#[test]
fn invariant_under_sigmoid_of_scaled_scores() {
    let tau = 0.05;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let inst = random_instance(&mut rng);
        let mapped: Vec<(f64, bool)> = inst.iter().map(|&(s, t)| (crate::nn::tape::sigmoid(s / tau), t)).collect();
        assert_eq!(aupr_of(&inst).unwrap(), aupr_of(&mapped).unwrap());
        assert_eq!(peak_f1(&inst).unwrap().0, peak_f1(&mapped).unwrap().0);
    }
}

#[test]
fn random_scores_give_prevalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pairs: Vec<(f64, bool)> = (0..10_000).map(|_| (rng.random::<f64>(), rng.random_bool(0.2))).collect();
    let prev = pairs.iter().filter(|p| p.1).count() as f64 / 1e4;
    let a = aupr_of(&pairs).unwrap();
    assert!((a - prev).abs() < 0.05 * prev, "aupr {a} prevalence {prev}");
}

#[test]
fn macro_average_over_labels() {
    let mut set = ScoredPairSet::from_scores("d", &[0.9, 0.1, 0.8, 0.7], &[true, false, false, true]);
    set.pairs[0].label = "a".into();
    set.pairs[1].label = "a".into();
    set.pairs[2].label = "b".into();
    set.pairs[3].label = "b".into();
    // Label a ranks perfectly (1.0); label b puts its positive second (0.5).
    assert!((macro_aupr(&set).unwrap() - 0.75).abs() < 1e-15);
}

fn set(name: &str, pairs: &[(f64, bool)]) -> ScoredPairSet {
    let (s, t): (Vec<f64>, Vec<bool>) = pairs.iter().copied().unzip();
    ScoredPairSet::from_scores(name, &s, &t)
}

#[test]
fn maxmin_single_and_duplicate() {
    let a = set("a", &hand());
    let one = select_threshold_maxmin(std::slice::from_ref(&a), None).unwrap();
    assert_eq!(one.threshold, peak_f1(&hand()).unwrap().1);
    let two = select_threshold_maxmin(&[a.clone(), a.clone()], None).unwrap();
    assert_eq!(two.threshold, one.threshold);
    assert_eq!(one.rule, "max-min");
    assert!(matches!(select_threshold_maxmin(&[], None), Err(MetricsError::NoDatasets)));
}

#[test]
fn maxmin_matches_grid_enumeration_oracle() {
    // F1 of a falls with the threshold over [0.1, 0.4]; F1 of b rises there.
    let a = set("a", &[(0.1, true), (0.2, true), (0.3, true), (0.4, true), (0.0, false)]);
    let b = set("b", &[(0.45, true), (0.5, true), (0.15, false), (0.25, false), (0.35, false)]);
    let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let sel = select_threshold_maxmin(&[a.clone(), b.clone()], Some(&grid)).unwrap();
    let mut best = (f64::NEG_INFINITY, 0.0);
    for &t in &grid {
        let m = oracle_f1(&a.scored(), t).min(oracle_f1(&b.scored(), t));
        if m > best.0 {
            best = (m, t);
        }
    }
    assert_eq!(sel.threshold, best.1);
    assert_eq!(sel.min_f1(), best.0);
    let pa = peak_f1(&a.scored()).unwrap().1;
    let pb = peak_f1(&b.scored()).unwrap().1;
    assert!(pa < sel.threshold && sel.threshold <= pb, "{pa} {} {pb}", sel.threshold);
}

#[test]
fn report_is_deterministic_and_consistent() {
    let sets = vec![set("a", &hand()), set("b", &[(0.7, true), (0.2, false), (0.4, true)])];
    let sel = select_threshold_maxmin(&sets, None).unwrap();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let r = emit_report(&sets, Some(sel.clone()), d1.path()).unwrap();
    emit_report(&sets, Some(sel.clone()), d2.path()).unwrap();
    let j1 = fs::read(d1.path().join(METRICS_FILE)).unwrap();
    assert_eq!(j1, fs::read(d2.path().join(METRICS_FILE)).unwrap());
    for (m, s) in r.datasets.iter().zip(&sets) {
        assert_eq!(m.aupr, aupr_of(&s.scored()).unwrap());
    }
    let back: MetricsReport = serde_json::from_slice(&j1).unwrap();
    assert_eq!(back, r);
    let svg = fs::read_to_string(d1.path().join(F1_CURVES_FILE)).unwrap();
    assert!(svg.starts_with("<svg"));
    for color in ["#1F77B4", "#FF7F0E"] {
        assert!(svg.contains(&format!("stroke=\"{color}\"")), "{color}");
    }
    assert!(!svg.contains("stroke=\"#2CA02C\""));
    assert!(svg.contains("selected"));
    let blocked = d1.path().join(METRICS_FILE).join("x");
    assert!(emit_report(&sets, None, &blocked).is_err());
}

#[test]
fn jsonl_round_trip() {
    let mut s = set("a", &hand());
    s.pairs[0].label = "rock climbing".into();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("pairs.jsonl");
    fs::write(&p, s.to_jsonl()).unwrap();
    assert_eq!(ScoredPairSet::read_jsonl(&p, "a").unwrap(), s);
    fs::write(&p, "{\"video\":\"v\",\"label\":\"x\",\"score\":0.1,\"truth\":2}\n").unwrap();
    assert!(ScoredPairSet::read_jsonl(&p, "a").is_err());
}

proptest! {
    #[test]
    fn peak_dominates_sweep_and_curve_is_monotone(
        raw in proptest::collection::vec((-1.0f64..1.0, any::<bool>()), 1..80)
    ) {
        let mut pairs = raw;
        pairs[0].1 = true;
        let (peak, _) = peak_f1(&pairs).unwrap();
        let grid = threshold_grid(pairs.iter().map(|p| p.0));
        for f in f1_sweep(&pairs, &grid) {
            prop_assert!(f <= peak && (0.0..=1.0).contains(&f));
        }
        let c = pr_curve(&pairs).unwrap();
        for w in c.points.windows(2) {
            prop_assert!(w[1].recall >= w[0].recall);
            prop_assert!(w[1].threshold < w[0].threshold);
        }
        prop_assert!(c.points.iter().all(|p| (0.0..=1.0).contains(&p.precision)));
        let a = aupr(&c);
        prop_assert!(a > 0.0 && a <= 1.0 + 1e-12);
    }
}
