//! Frame index sampling and the frozen-tap cache.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex};

use rand::Rng;

use super::VideoError;
use crate::backbones::{FrameTaps, ToyVisionBackbone};
use crate::nn::{Mat, ParamStore, Precision};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Train,
    Eval,
}

/// Frame indices per clip. Train mode draws one clip of `f` frames, one per
/// equal-length segment with uniform jitter; eval mode tiles `clips` clips at
/// evenly spaced offsets. Videos shorter than `f` repeat frames.
pub fn sample_frames<R: Rng + ?Sized>(
    video_len: usize,
    f: usize,
    clips: usize,
    mode: SampleMode,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>, VideoError> {
    if video_len == 0 {
        return Err(VideoError::EmptyVideo);
    }
    if f == 0 || clips == 0 {
        return Err(VideoError::Config("frames per clip and clip count must be positive".into()));
    }
    let seg = video_len as f64 / f as f64;
    let pick = |pos: f64| ((pos * seg).floor() as usize).min(video_len - 1);
    Ok(match mode {
        SampleMode::Train => {
            vec![(0..f).map(|i| pick(i as f64 + rng.random::<f64>())).collect()]
        }
        SampleMode::Eval => (0..clips)
            .map(|c| {
                let offset = (c as f64 + 0.5) / clips as f64;
                (0..f).map(|i| pick(i as f64 + offset)).collect()
            })
            .collect(),
    })
}

fn frame_key(frame: &Mat) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    frame.shape().hash(&mut h);
    for v in frame.data() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Memoizes backbone activations per frame content. Only valid while the
/// vision backbone is frozen.
#[derive(Debug, Default)]
pub struct TapCache {
    map: Mutex<HashMap<u64, Vec<(Mat, Arc<FrameTaps>)>>>,
}

impl TapCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("tap cache lock").values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Taps of every frame, encoding the missing ones in one stacked pass.
    pub fn taps(
        &self,
        vision: &ToyVisionBackbone,
        store: &ParamStore,
        precision: Precision,
        frames: &[&Mat],
    ) -> Result<Vec<Arc<FrameTaps>>, VideoError> {
        let mut out: Vec<Option<Arc<FrameTaps>>> = vec![None; frames.len()];
        let mut missing = Vec::new();
        {
            let map = self.map.lock().expect("tap cache lock");
            for (i, f) in frames.iter().enumerate() {
                let hit = map.get(&frame_key(f)).and_then(|b| b.iter().find(|(m, _)| m.bit_eq(f)).map(|(_, t)| t.clone()));
                match hit {
                    Some(t) => out[i] = Some(t),
                    None => missing.push(i),
                }
            }
        }
        if !missing.is_empty() {
            let mats: Vec<Mat> = missing.iter().map(|&i| frames[i].clone()).collect();
            let enc = vision.clip_encode_frames(store, precision, &mats)?;
            let mut map = self.map.lock().expect("tap cache lock");
            for ((&i, m), t) in missing.iter().zip(mats).zip(enc) {
                let t = Arc::new(t);
                let bucket = map.entry(frame_key(&m)).or_default();
                if !bucket.iter().any(|(x, _)| x.bit_eq(&m)) {
                    bucket.push((m, t.clone()));
                }
                out[i] = Some(t);
            }
        }
        Ok(out.into_iter().map(|t| t.expect("filled")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_tiles_clips() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx = sample_frames(64, 8, 4, SampleMode::Eval, &mut rng).unwrap();
        assert_eq!(idx.len(), 4);
        assert_eq!(idx.iter().map(Vec::len).sum::<usize>(), 32);
        for clip in &idx {
            assert!(clip.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn short_videos_repeat_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx = sample_frames(3, 8, 1, SampleMode::Train, &mut rng).unwrap();
        assert_eq!(idx[0].len(), 8);
        assert!(idx[0].iter().all(|&i| i < 3));
        assert!(idx[0].windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn train_sampling_is_seeded() {
        let a = sample_frames(40, 8, 1, SampleMode::Train, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_frames(40, 8, 1, SampleMode::Train, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_video_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_frames(0, 8, 1, SampleMode::Eval, &mut rng), Err(VideoError::EmptyVideo)));
    }

    #[test]
    fn full_length_videos_use_every_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = sample_frames(8, 8, 1, SampleMode::Train, &mut rng).unwrap();
        let e = sample_frames(8, 8, 1, SampleMode::Eval, &mut rng).unwrap();
        assert_eq!(t[0], (0..8).collect::<Vec<_>>());
        assert_eq!(e[0], (0..8).collect::<Vec<_>>());
    }
}
