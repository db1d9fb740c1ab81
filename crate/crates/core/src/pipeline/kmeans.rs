//! Lloyd's k-means with k-means++ seeding.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PipelineError;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// Cluster of every input vector.
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each assignment step.
    pub inertia: Vec<f64>,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, ties to the lower index.
fn nearest(v: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(v, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus(vectors: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>, PipelineError> {
    let mut centroids = vec![vectors[rng.random_range(0..vectors.len())].clone()];
    let mut d2: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &centroids[0])).collect();
    while centroids.len() < k {
        let dist = WeightedIndex::new(&d2).map_err(|_| PipelineError::KMeans(format!("k = {k} exceeds the number of distinct vectors")))?;
        let next = vectors[dist.sample(rng)].clone();
        for (d, v) in d2.iter_mut().zip(vectors) {
            *d = d.min(sq_dist(v, &next));
        }
        centroids.push(next);
    }
    Ok(centroids)
}

/// Clusters `vectors` into `k` groups. Stops when assignments stop changing
/// or after `max_iters` update steps. An emptied cluster keeps its centroid.
pub fn kmeans(vectors: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult, PipelineError> {
    if k == 0 {
        return Err(PipelineError::KMeans("k must be positive".into()));
    }
    if k > vectors.len() {
        return Err(PipelineError::KMeans(format!("k = {k} exceeds {} vectors", vectors.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus(vectors, k, &mut rng)?;
    let assign = |centroids: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let mut total = 0.0;
        let a = vectors
            .iter()
            .map(|v| {
                let (j, d) = nearest(v, centroids);
                total += d;
                j
            })
            .collect();
        (a, total)
    };
    let (mut assignment, w) = assign(&centroids);
    let mut inertia = vec![w];
    let mut converged = false;
    for _ in 0..max_iters {
        let dim = vectors[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, &j) in vectors.iter().zip(&assignment) {
            counts[j] += 1;
            for (s, x) in sums[j].iter_mut().zip(v) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let (next, w) = assign(&centroids);
        inertia.push(w);
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
    }
    Ok(KMeansResult {
        assignment,
        centroids,
        inertia,
        converged,
    })
}

/// Best of `restarts` runs by final inertia, ties to the earliest run.
/// Run `i` uses seed `seed + i`.
pub fn kmeans_best_of(vectors: &[Vec<f64>], k: usize, seed: u64, max_iters: usize, restarts: usize) -> Result<KMeansResult, PipelineError> {
    let mut best: Option<KMeansResult> = None;
    for i in 0..restarts.max(1) as u64 {
        let r = kmeans(vectors, k, seed.wrapping_add(i), max_iters)?;
        let better = best.as_ref().is_none_or(|b| r.inertia.last() < b.inertia.last());
        if better {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one run"))
}
