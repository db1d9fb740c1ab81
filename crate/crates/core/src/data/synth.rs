//! Seeded synthetic video world. Every concept owns a latent patch pattern;
//! static concepts draw it in every frame, temporal concepts rotate between
//! two patterns over time. Direction pairs rotate in opposite senses, so the
//! two members contain the same multiset of frames and differ only in order.

use std::f64::consts::TAU;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{ConceptInfo, DatasetInfo, FrameSource, ManifestRecord, Split};
use super::wordbank::{ConceptKind, STATIC_CONCEPTS, TEMPORAL_CONCEPTS};
use super::DataError;
use crate::nn::init::{derive_seed, seeded_normal};
use crate::nn::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDatasetSpec {
    pub static_concepts: usize,
    /// Must be even: concepts come in direction pairs.
    pub temporal_concepts: usize,
    pub train_videos: usize,
    pub val_videos: usize,
    pub test_closed_videos: usize,
    pub test_open_videos: usize,
    pub min_labels: usize,
    pub max_labels: usize,
    pub noise: f64,
    pub pattern_scale: f64,
    pub frames_per_video: usize,
    pub grid: usize,
    pub patch_dim: usize,
    /// Draws another set of videos over the same concept patterns. Domain 0
    /// is the base manifest.
    pub domain: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            static_concepts: 10,
            temporal_concepts: 6,
            train_videos: 256,
            val_videos: 64,
            test_closed_videos: 64,
            test_open_videos: 32,
            min_labels: 1,
            max_labels: 4,
            noise: 0.5,
            pattern_scale: 1.0,
            frames_per_video: 8,
            grid: 4,
            patch_dim: 8,
            domain: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn concepts(&self) -> usize {
        self.static_concepts + self.temporal_concepts
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.static_concepts > STATIC_CONCEPTS.len() || self.temporal_concepts > TEMPORAL_CONCEPTS.len() {
            return Err(DataError::Capacity {
                requested: self.concepts(),
                static_available: STATIC_CONCEPTS.len(),
                temporal_available: TEMPORAL_CONCEPTS.len(),
            });
        }
        if self.temporal_concepts % 2 != 0 {
            return Err(DataError::Spec("temporal concepts come in pairs; count must be even".into()));
        }
        if self.concepts() == 0 || self.min_labels == 0 || self.min_labels > self.max_labels {
            return Err(DataError::Spec("need at least one concept and 1 <= min_labels <= max_labels".into()));
        }
        // A video never carries both members of a direction pair.
        let distinct = self.static_concepts + self.temporal_concepts / 2;
        if self.max_labels > distinct {
            return Err(DataError::Spec(format!("max_labels {} exceeds {} compatible concepts", self.max_labels, distinct)));
        }
        if self.frames_per_video == 0 || self.grid == 0 || self.patch_dim == 0 {
            return Err(DataError::Spec("frame geometry must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(DataError::Spec("noise must be a finite nonnegative number".into()));
        }
        Ok(())
    }

    pub fn concept_infos(&self) -> Vec<ConceptInfo> {
        STATIC_CONCEPTS[..self.static_concepts]
            .iter()
            .chain(&TEMPORAL_CONCEPTS[..self.temporal_concepts])
            .map(|c| ConceptInfo {
                name: c.name.to_string(),
                synonym: c.synonym.to_string(),
                kind: c.kind,
            })
            .collect()
    }
}

/// Latent patterns of one dataset seed; renders frames from generator params.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub spec: SyntheticDatasetSpec,
    pub seed: u64,
    /// Static concepts: one pattern. Temporal concepts: the (cos, sin) pair, shared within a direction pair.
    patterns: Vec<(Mat, Option<Mat>)>,
    kinds: Vec<ConceptKind>,
}

impl SyntheticWorld {
    pub fn new(spec: SyntheticDatasetSpec, seed: u64) -> Result<Self, DataError> {
        spec.validate()?;
        let rows = spec.grid * spec.grid;
        let infos = spec.concept_infos();
        let mut patterns = Vec::with_capacity(infos.len());
        for (c, info) in infos.iter().enumerate() {
            let p = match info.kind {
                ConceptKind::Static => {
                    let a = seeded_normal(rows, spec.patch_dim, derive_seed(seed, &format!("pattern.{c}")), spec.pattern_scale);
                    (a, None)
                }
                ConceptKind::Temporal => {
                    let pair = (c - spec.static_concepts) / 2;
                    let a = seeded_normal(rows, spec.patch_dim, derive_seed(seed, &format!("pair.{pair}.cos")), spec.pattern_scale);
                    let b = seeded_normal(rows, spec.patch_dim, derive_seed(seed, &format!("pair.{pair}.sin")), spec.pattern_scale);
                    (a, Some(b))
                }
            };
            patterns.push(p);
        }
        Ok(Self {
            kinds: infos.iter().map(|i| i.kind).collect(),
            spec,
            seed,
            patterns,
        })
    }

    /// +1 or −1 rotation sense of a temporal concept.
    fn direction(&self, c: usize) -> f64 {
        if (c - self.spec.static_concepts) % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Noise-free contribution of concept `c` to frame `f`.
    pub fn concept_frame(&self, c: usize, phase_step: usize, f: usize) -> Mat {
        let (a, b) = &self.patterns[c];
        match (self.kinds[c], b) {
            (ConceptKind::Temporal, Some(b)) => {
                let n = self.spec.frames_per_video;
                // Integer phase steps keep the frame multisets of a pair identical.
                let k = (n as i64 + self.direction(c) as i64 * (f as i64 + phase_step as i64)).rem_euclid(n as i64);
                let theta = TAU * k as f64 / n as f64;
                let (s, co) = theta.sin_cos();
                let mut out = a.clone();
                for (o, (x, y)) in out.data_mut().iter_mut().zip(a.data().iter().zip(b.data())) {
                    *o = co * x + s * y;
                }
                out
            }
            _ => a.clone(),
        }
    }

    pub fn render(&self, concepts: &[usize], phases: &[usize], noise_seed: u64) -> Result<Vec<Mat>, DataError> {
        if concepts.len() != phases.len() || concepts.iter().any(|&c| c >= self.patterns.len()) {
            return Err(DataError::Format("generator params do not match the dataset".into()));
        }
        let rows = self.spec.grid * self.spec.grid;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        Ok((0..self.spec.frames_per_video)
            .map(|f| {
                let mut frame = Mat::zeros(rows, self.spec.patch_dim);
                for (&c, &p) in concepts.iter().zip(phases) {
                    let cf = self.concept_frame(c, p, f);
                    for (o, v) in frame.data_mut().iter_mut().zip(cf.data()) {
                        *o += v;
                    }
                }
                if self.spec.noise > 0.0 {
                    for o in frame.data_mut() {
                        *o += self.spec.noise * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                frame
            })
            .collect())
    }

    pub fn materialize(&self, record: &ManifestRecord) -> Result<Vec<Mat>, DataError> {
        match &record.source {
            FrameSource::Generator {
                concepts,
                phases,
                noise_seed,
            } => self.render(concepts, phases, *noise_seed),
            FrameSource::File { path, frames } => {
                super::manifest::read_frame_file(path, *frames, self.spec.grid * self.spec.grid, self.spec.patch_dim)
            }
        }
    }
}

/// Draws the manifest of a synthetic dataset.
pub fn generate_synthetic_dataset(spec: &SyntheticDatasetSpec, seed: u64) -> Result<(DatasetInfo, Vec<ManifestRecord>), DataError> {
    spec.validate()?;
    let infos = spec.concept_infos();
    let stream = if spec.domain == 0 { "manifest".to_string() } else { format!("manifest.domain{}", spec.domain) };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &stream));
    let splits = [
        (Split::Train, spec.train_videos),
        (Split::Val, spec.val_videos),
        (Split::TestClosed, spec.test_closed_videos),
        (Split::TestOpen, spec.test_open_videos),
    ];
    let c = infos.len();
    let mut records = Vec::new();
    for (split, count) in splits {
        for i in 0..count {
            let n_labels = rng.random_range(spec.min_labels..=spec.max_labels);
            let mut chosen: Vec<usize> = Vec::with_capacity(n_labels);
            while chosen.len() < n_labels {
                let cand = sample(&mut rng, c, 1).index(0);
                let clash = chosen.iter().any(|&x| {
                    x == cand
                        || (x >= spec.static_concepts
                            && cand >= spec.static_concepts
                            && (x - spec.static_concepts) / 2 == (cand - spec.static_concepts) / 2)
                });
                if !clash {
                    chosen.push(cand);
                }
            }
            chosen.sort_unstable();
            let phases = chosen
                .iter()
                .map(|&k| if k >= spec.static_concepts { rng.random_range(0..spec.frames_per_video) } else { 0 })
                .collect();
            let labels = chosen
                .iter()
                .map(|&k| if split == Split::TestOpen { infos[k].synonym.clone() } else { infos[k].name.clone() })
                .collect();
            records.push(ManifestRecord {
                video_id: format!("{}-{i:04}", split.as_str()),
                source: FrameSource::Generator {
                    concepts: chosen,
                    phases,
                    noise_seed: rng.random(),
                },
                labels,
                split,
            });
        }
    }
    let info = DatasetInfo {
        spec: spec.clone(),
        seed,
        concepts: infos,
    };
    Ok((info, records))
}
