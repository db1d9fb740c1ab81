//! Ranking metrics over pooled (video, label) decisions and cross-domain
//! threshold selection.
//!
//! Every function here is threshold-invariant under strictly increasing
//! transforms of the scores: only the order of scores and their ties matter.

mod report;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use report::{emit_report, render_f1_svg, DatasetMetrics, MetricsReport, F1_CURVES_FILE, METRICS_FILE};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("undefined recall: no positive pairs")]
    NoPositives,
    #[error("no validation datasets")]
    NoDatasets,
    #[error("non-finite score {0}")]
    NonFinite(f64),
    #[error("io: {0}")]
    Io(String),
    #[error("bad scored-pairs file: {0}")]
    Format(String),
}

/// One scored decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub video: String,
    pub label: String,
    pub score: f64,
    /// 0 or 1.
    pub truth: u8,
}

impl ScoredPair {
    pub fn positive(&self) -> bool {
        self.truth != 0
    }
}

/// All decisions of one dataset over its full evaluation vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPairSet {
    pub dataset: String,
    pub pairs: Vec<ScoredPair>,
}

impl ScoredPairSet {
    pub fn new(dataset: impl Into<String>, pairs: Vec<ScoredPair>) -> Self {
        Self {
            dataset: dataset.into(),
            pairs,
        }
    }

    /// Anonymous pairs from parallel score and truth slices.
    pub fn from_scores(dataset: impl Into<String>, scores: &[f64], truths: &[bool]) -> Self {
        assert_eq!(scores.len(), truths.len(), "scores/truths length mismatch");
        let pairs = scores
            .iter()
            .zip(truths)
            .enumerate()
            .map(|(i, (&score, &t))| ScoredPair {
                video: format!("v{i}"),
                label: String::new(),
                score,
                truth: t as u8,
            })
            .collect();
        Self::new(dataset, pairs)
    }

    pub fn scored(&self) -> Vec<(f64, bool)> {
        self.pairs.iter().map(|p| (p.score, p.positive())).collect()
    }

    pub fn positives(&self) -> usize {
        self.pairs.iter().filter(|p| p.positive()).count()
    }

    pub fn prevalence(&self) -> f64 {
        if self.pairs.is_empty() {
            0.0
        } else {
            self.positives() as f64 / self.pairs.len() as f64
        }
    }

    /// Restricts to pairs whose label satisfies `keep`.
    pub fn filter_labels(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self::new(self.dataset.clone(), self.pairs.iter().filter(|p| keep(&p.label)).cloned().collect())
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for p in &self.pairs {
            s.push_str(&serde_json::to_string(p).expect("pairs serialize"));
            s.push('\n');
        }
        s
    }

    pub fn read_jsonl(path: &Path, dataset: impl Into<String>) -> Result<Self, MetricsError> {
        let f = fs::File::open(path).map_err(|e| MetricsError::Io(format!("{}: {e}", path.display())))?;
        let mut pairs = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| MetricsError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let p: ScoredPair = serde_json::from_str(&line).map_err(|e| MetricsError::Format(format!("line {}: {e}", i + 1)))?;
            if p.truth > 1 {
                return Err(MetricsError::Format(format!("line {}: truth must be 0 or 1", i + 1)));
            }
            pairs.push(p);
        }
        Ok(Self::new(dataset, pairs))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    /// Predict positive iff `s ≥ threshold`.
    pub threshold: f64,
}

/// Points in order of decreasing threshold; recall never decreases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

fn check_finite(pairs: &[(f64, bool)]) -> Result<(), MetricsError> {
    match pairs.iter().find(|(s, _)| !s.is_finite()) {
        Some(&(s, _)) => Err(MetricsError::NonFinite(s)),
        None => Ok(()),
    }
}

fn descending(pairs: &[(f64, bool)]) -> Vec<(f64, bool)> {
    let mut v = pairs.to_vec();
    v.sort_by(|a, b| b.0.total_cmp(&a.0));
    v
}

/// One point per distinct score; tied records enter together.
pub fn pr_curve(pairs: &[(f64, bool)]) -> Result<PrCurve, MetricsError> {
    check_finite(pairs)?;
    let total = pairs.iter().filter(|p| p.1).count();
    if total == 0 {
        return Err(MetricsError::NoPositives);
    }
    let sorted = descending(pairs);
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            tp += sorted[i].1 as usize;
            seen += 1;
            i += 1;
        }
        points.push(PrPoint {
            recall: tp as f64 / total as f64,
            precision: tp as f64 / seen as f64,
            threshold: s,
        });
    }
    Ok(PrCurve { points })
}

/// Step-integrated average precision `Σ ΔR·P`.
pub fn aupr(curve: &PrCurve) -> f64 {
    let mut prev = 0.0;
    let mut area = 0.0;
    for p in &curve.points {
        area += (p.recall - prev) * p.precision;
        prev = p.recall;
    }
    area
}

/// AUPR of a pair set in one call.
pub fn aupr_of(pairs: &[(f64, bool)]) -> Result<f64, MetricsError> {
    Ok(aupr(&pr_curve(pairs)?))
}

/// Mean per-label AUPR over labels with at least one positive.
pub fn macro_aupr(set: &ScoredPairSet) -> Result<f64, MetricsError> {
    let mut by_label: BTreeMap<&str, Vec<(f64, bool)>> = BTreeMap::new();
    for p in &set.pairs {
        by_label.entry(p.label.as_str()).or_default().push((p.score, p.positive()));
    }
    let mut vals = Vec::new();
    for pairs in by_label.values() {
        if pairs.iter().any(|p| p.1) {
            vals.push(aupr_of(pairs)?);
        }
    }
    if vals.is_empty() {
        return Err(MetricsError::NoPositives);
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Micro F1 at every grid threshold.
pub fn f1_sweep(pairs: &[(f64, bool)], grid: &[f64]) -> Vec<f64> {
    let sorted = descending(pairs);
    // Cumulative positives among the top-k records.
    let mut cum = Vec::with_capacity(sorted.len() + 1);
    cum.push(0usize);
    for (_, t) in &sorted {
        cum.push(cum.last().unwrap() + *t as usize);
    }
    let total = *cum.last().unwrap();
    grid.iter()
        .map(|&thr| {
            let k = sorted.partition_point(|p| p.0 >= thr);
            let tp = cum[k];
            f1_from_counts(tp, k - tp, total - tp)
        })
        .collect()
}

/// Distinct scores plus midpoints between neighbours, ascending.
pub fn threshold_grid(scores: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut s: Vec<f64> = scores.into_iter().filter(|v| v.is_finite()).collect();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut grid = Vec::with_capacity(2 * s.len());
    for (i, &v) in s.iter().enumerate() {
        if i > 0 {
            let mid = 0.5 * (s[i - 1] + v);
            if mid > s[i - 1] && mid < v {
                grid.push(mid);
            }
        }
        grid.push(v);
    }
    grid
}

/// Best F1 over the grid of the pairs' own scores and midpoints, with the
/// lowest threshold attaining it.
pub fn peak_f1(pairs: &[(f64, bool)]) -> Result<(f64, f64), MetricsError> {
    check_finite(pairs)?;
    if !pairs.iter().any(|p| p.1) {
        return Err(MetricsError::NoPositives);
    }
    let grid = threshold_grid(pairs.iter().map(|p| p.0));
    let f1 = f1_sweep(pairs, &grid);
    Ok(argmax_lowest(&grid, &f1))
}

fn argmax_lowest(grid: &[f64], vals: &[f64]) -> (f64, f64) {
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for (&t, &v) in grid.iter().zip(vals) {
        // Ascending grid: strict improvement keeps the lower threshold on ties.
        if v.partial_cmp(&best.0) == Some(Ordering::Greater) {
            best = (v, t);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSelection {
    pub threshold: f64,
    /// F1 of each dataset at `threshold`, in input order.
    pub per_dataset: Vec<(String, f64)>,
    pub rule: String,
}

impl ThresholdSelection {
    pub fn min_f1(&self) -> f64 {
        self.per_dataset.iter().map(|d| d.1).fold(f64::INFINITY, f64::min)
    }
}

/// Threshold maximizing the worst F1 across `sets`. Without a grid, uses
/// the pooled distinct scores plus midpoints.
pub fn select_threshold_maxmin(sets: &[ScoredPairSet], grid: Option<&[f64]>) -> Result<ThresholdSelection, MetricsError> {
    if sets.is_empty() {
        return Err(MetricsError::NoDatasets);
    }
    let scored: Vec<Vec<(f64, bool)>> = sets.iter().map(|s| s.scored()).collect();
    for s in &scored {
        check_finite(s)?;
    }
    let owned;
    let grid = match grid {
        Some(g) => {
            let mut g = g.to_vec();
            g.sort_by(f64::total_cmp);
            owned = g;
            &owned
        }
        None => {
            owned = threshold_grid(scored.iter().flatten().map(|p| p.0));
            &owned
        }
    };
    let curves: Vec<Vec<f64>> = scored.iter().map(|s| f1_sweep(s, grid)).collect();
    let worst: Vec<f64> = (0..grid.len()).map(|i| curves.iter().map(|c| c[i]).fold(f64::INFINITY, f64::min)).collect();
    let (_, threshold) = argmax_lowest(grid, &worst);
    let per_dataset = sets
        .iter()
        .zip(&scored)
        .map(|(set, s)| (set.dataset.clone(), f1_sweep(s, &[threshold])[0]))
        .collect();
    Ok(ThresholdSelection {
        threshold,
        per_dataset,
        rule: "max-min".into(),
    })
}

#[cfg(test)]
mod tests;
