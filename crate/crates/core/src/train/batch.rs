//! Batches with a fixed class budget of `4B` labels.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;

use super::TrainError;

/// Label budget per batch of `b` videos.
pub fn class_budget(b: usize) -> usize {
    4 * b
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    /// Indices of the sampled videos.
    pub videos: Vec<usize>,
    /// 𝒫(v) per video, as vocabulary indices.
    pub positives: Vec<BTreeSet<usize>>,
    /// 𝒫_𝓑: union of the per-video positives.
    pub pooled_positives: BTreeSet<usize>,
    /// 𝒩_𝓑: sampled negatives, disjoint from 𝒫_𝓑.
    pub sampled_negatives: BTreeSet<usize>,
    /// 𝒫_𝓑 ∪ 𝒩_𝓑 in ascending order; score columns follow this order.
    pub pool: Vec<usize>,
}

impl TrainingBatch {
    /// 𝒩(v) = pool \ 𝒫(v).
    pub fn negatives(&self, v: usize) -> BTreeSet<usize> {
        self.pool.iter().copied().filter(|l| !self.positives[v].contains(l)).collect()
    }

    /// Row-major `B × |pool|` 0/1 targets.
    pub fn targets(&self) -> Vec<f64> {
        self.positives
            .iter()
            .flat_map(|p| self.pool.iter().map(move |l| if p.contains(l) { 1.0 } else { 0.0 }))
            .collect()
    }
}

/// Samples `b` videos without replacement and fills the label pool to `4b`
/// with negatives drawn uniformly from the rest of the vocabulary.
pub fn build_batch<R: Rng + ?Sized>(
    video_labels: &[Vec<usize>],
    vocab_size: usize,
    b: usize,
    rng: &mut R,
) -> Result<TrainingBatch, TrainError> {
    let budget = class_budget(b);
    if b == 0 || b > video_labels.len() {
        return Err(TrainError::Config(format!("batch size {b} with {} training videos", video_labels.len())));
    }
    if vocab_size < budget {
        return Err(TrainError::Config(format!("vocabulary of {vocab_size} labels is smaller than the 4B budget {budget}")));
    }
    let videos: Vec<usize> = sample(rng, video_labels.len(), b).into_vec();
    let positives: Vec<BTreeSet<usize>> = videos.iter().map(|&v| video_labels[v].iter().copied().collect()).collect();
    let pooled_positives: BTreeSet<usize> = positives.iter().flatten().copied().collect();
    if let Some(&bad) = pooled_positives.iter().find(|&&l| l >= vocab_size) {
        return Err(TrainError::Config(format!("label index {bad} outside vocabulary of {vocab_size}")));
    }
    if pooled_positives.len() > budget {
        return Err(TrainError::ClassBudget {
            positives: pooled_positives.len(),
            budget,
        });
    }
    let rest: Vec<usize> = (0..vocab_size).filter(|l| !pooled_positives.contains(l)).collect();
    let need = budget - pooled_positives.len();
    let sampled_negatives: BTreeSet<usize> = sample(rng, rest.len(), need).into_iter().map(|i| rest[i]).collect();
    let pool = pooled_positives.union(&sampled_negatives).copied().collect();
    Ok(TrainingBatch {
        videos,
        positives,
        pooled_positives,
        sampled_negatives,
        pool,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_videos_with_overlap() {
        let labels = vec![vec![0, 1], vec![1, 2]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = build_batch(&labels, 20, 2, &mut rng).unwrap();
        assert_eq!(b.pooled_positives.len(), 3);
        assert_eq!(b.sampled_negatives.len(), 5);
        for v in 0..2 {
            assert_eq!(b.positives[v].len() + b.negatives(v).len(), 8);
        }
    }

    #[test]
    fn empty_positive_video() {
        let labels = vec![vec![]];
        let b = build_batch(&labels, 10, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(b.sampled_negatives.len(), 4);
        assert_eq!(b.negatives(0).len(), 4);
        assert!(b.targets().iter().all(|&t| t == 0.0));
    }

    #[test]
    fn too_many_positives_is_an_error() {
        let labels = vec![(0..5).collect::<Vec<_>>()];
        let err = build_batch(&labels, 10, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(err.to_string().contains("batch positives exceed class budget"), "{err}");
        let small = build_batch(&[vec![0]], 3, 1, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(small, Err(TrainError::Config(_))));
    }
}
