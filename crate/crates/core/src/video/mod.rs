//! Video encoder: the frozen frame backbone plus a trainable temporal branch
//! that runs beside its last `T` layers and summarizes the clip in a TMP token.

pub mod frames;

use std::rc::Rc;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use frames::{sample_frames, SampleMode, TapCache};

use crate::backbones::{BackboneError, Backbones, FrameTaps};
use crate::nn::init::{derive_seed, seeded_normal};
use crate::nn::layers::{AttentionVars, LayerNormVars, LinearVars};
use crate::nn::{
    AttentionSpec, AttnLayout, InitOpts, InitScheme, LayerNorm, Linear, Mat, MultiHeadAttention, NnError, ParamId,
    ParamStore, Precision, Tape, Var,
};

#[derive(Debug, thiserror::Error)]
pub enum VideoError {
    #[error("video has no frames")]
    EmptyVideo,
    #[error("swa lambda must lie in [0, 1], got {0}")]
    InvalidLambda(f64),
    #[error("tap index {index} out of range for a backbone with {layers} layers")]
    TapIndex { index: usize, layers: usize },
    #[error("clip has {got} frames but the temporal positional table holds {max}")]
    ClipTooLong { got: usize, max: usize },
    #[error("invalid video encoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwaMode {
    TrainStochastic,
    EvalMean,
    EvalFinetuned,
}

impl SwaMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::TrainStochastic => "train_stochastic",
            Self::EvalMean => "eval_mean",
            Self::EvalFinetuned => "eval_finetuned",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::TrainStochastic, Self::EvalMean, Self::EvalFinetuned].into_iter().find(|m| m.as_str() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwaConfig {
    pub lambda: f64,
    /// Mode used while training. `eval_finetuned` turns interpolation off.
    pub mode: SwaMode,
    /// Weight of the L2 anchor penalty; 0 disables it.
    pub anchor_l2_coeff: f64,
}

impl Default for SwaConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            mode: SwaMode::TrainStochastic,
            anchor_l2_coeff: 1e-6,
        }
    }
}

impl SwaConfig {
    pub fn validate(&self) -> Result<(), VideoError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(VideoError::InvalidLambda(self.lambda));
        }
        Ok(())
    }

    /// Mode for inference: finetuned weights when training never
    /// interpolated, otherwise the expected interpolation.
    pub fn inference_mode(&self) -> SwaMode {
        match self.mode {
            SwaMode::EvalFinetuned => SwaMode::EvalFinetuned,
            _ => SwaMode::EvalMean,
        }
    }
}

/// Interpolation coefficient for one block and one forward pass.
pub fn swa_alpha(lambda: f64, mode: SwaMode, rng: &mut dyn RngCore) -> Result<f64, VideoError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(VideoError::InvalidLambda(lambda));
    }
    Ok(match mode {
        SwaMode::TrainStochastic => lambda * rng.random::<f64>(),
        SwaMode::EvalMean => lambda / 2.0,
        SwaMode::EvalFinetuned => 1.0,
    })
}

/// `α·θ_ft + (1−α)·θ_frozen` on the tape. The endpoints return the operands
/// themselves so that α=0 reproduces the frozen weights bit for bit.
pub fn swa_effective_weights(tape: &Tape, ft: Var, frozen: &Mat, alpha: f64) -> Var {
    if alpha == 0.0 {
        tape.constant(frozen.clone())
    } else if alpha == 1.0 {
        ft
    } else {
        let fz = tape.constant(frozen.clone());
        tape.axpby(alpha, ft, 1.0 - alpha, fz)
    }
}

/// Mean of per-frame CLS vectors at the branch entry.
pub fn init_tmp(cls: &[Vec<f64>]) -> Result<Vec<f64>, VideoError> {
    let first = cls.first().ok_or(VideoError::EmptyVideo)?;
    let mut out = vec![0.0; first.len()];
    for c in cls {
        if c.len() != out.len() {
            return Err(VideoError::Config("CLS widths differ".into()));
        }
        for (o, v) in out.iter_mut().zip(c) {
            *o += v;
        }
    }
    let n = cls.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEncoderConfig {
    /// Runs the temporal branch; off means plain frame-mean pooling.
    pub enabled: bool,
    /// T, the number of tapped backbone layers.
    pub blocks: usize,
    pub swa: SwaConfig,
    /// Ablation: skip temporal attention inside every block.
    pub disable_temporal_attention: bool,
    pub frames_per_clip: usize,
    pub eval_clips: usize,
    pub temporal_pos_std: f64,
}

impl Default for VideoEncoderConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            blocks: 4,
            swa: SwaConfig::default(),
            disable_temporal_attention: false,
            frames_per_clip: 8,
            eval_clips: 4,
            temporal_pos_std: 0.5,
        }
    }
}

impl VideoEncoderConfig {
    pub fn active_blocks(&self) -> usize {
        if self.enabled {
            self.blocks
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoEmbedding {
    pub vector: Vec<f64>,
    pub video_id: String,
    pub frames_used: usize,
}

/// One branch block. Spatial weights are anchored copies of the tapped
/// backbone layer; their snapshots hold the frozen originals.
#[derive(Clone, Debug)]
pub struct TemporalBlock {
    pub index: usize,
    pub tap_layer: usize,
    pub proj_spatial: Linear,
    pub temporal_ln: LayerNorm,
    pub temporal_attn: MultiHeadAttention,
    pub spatial_ln: LayerNorm,
    pub spatial_attn: MultiHeadAttention,
}

fn anchored_copy(store: &mut ParamStore, src: ParamId, name: String) -> Result<ParamId, NnError> {
    let v = store.values(src).clone();
    store.add_anchored(name, v)
}

fn anchored_linear(store: &mut ParamStore, src: &Linear, name: &str) -> Result<Linear, NnError> {
    Ok(Linear {
        weight: anchored_copy(store, src.weight, format!("{name}.weight"))?,
        bias: anchored_copy(store, src.bias, format!("{name}.bias"))?,
        in_dim: src.in_dim,
        out_dim: src.out_dim,
    })
}

fn swa_param(tape: &Tape, store: &ParamStore, id: ParamId, alpha: f64) -> Var {
    let p = store.get(id);
    match &p.frozen_snapshot {
        Some(fz) if p.trainable => swa_effective_weights(tape, tape.param(store, id), fz, alpha),
        _ => tape.param(store, id),
    }
}

fn swa_linear(tape: &Tape, store: &ParamStore, l: &Linear, alpha: f64) -> LinearVars {
    LinearVars {
        weight: swa_param(tape, store, l.weight, alpha),
        bias: swa_param(tape, store, l.bias, alpha),
    }
}

impl TemporalBlock {
    fn new(store: &mut ParamStore, bb: &Backbones, index: usize, tap_layer: usize, seed: u64) -> Result<Self, VideoError> {
        let layers = bb.vision.layers();
        if tap_layer == 0 || tap_layer > layers {
            return Err(VideoError::TapIndex { index: tap_layer, layers });
        }
        let d = bb.vision.width;
        let name = format!("video.block{index}");
        let opts = InitOpts::new(derive_seed(seed, &name), true);
        let src = &bb.vision.blocks[tap_layer - 1];
        let spec = AttentionSpec::new(bb.config.heads, d, false)?;
        let proj_spatial = Linear::new(store, &format!("{name}.proj_spatial"), d, d, InitScheme::Zeros, opts)?;
        let temporal_ln = LayerNorm::new(store, &format!("{name}.temporal_ln"), d, opts)?;
        let temporal_attn = MultiHeadAttention::new(store, &format!("{name}.temporal_attn"), spec, false, opts)?;
        let spatial_ln = LayerNorm {
            gain: anchored_copy(store, src.ln1.gain, format!("{name}.spatial_ln.gain"))?,
            bias: anchored_copy(store, src.ln1.bias, format!("{name}.spatial_ln.bias"))?,
        };
        let sa = &src.attn;
        let spatial_attn = MultiHeadAttention {
            spec,
            wq: anchored_linear(store, &sa.wq, &format!("{name}.spatial_attn.wq"))?,
            wk: anchored_linear(store, &sa.wk, &format!("{name}.spatial_attn.wk"))?,
            wv: anchored_linear(store, &sa.wv, &format!("{name}.spatial_attn.wv"))?,
            wo: anchored_linear(store, &sa.wo, &format!("{name}.spatial_attn.wo"))?,
        };
        Ok(Self {
            index,
            tap_layer,
            proj_spatial,
            temporal_ln,
            temporal_attn,
            spatial_ln,
            spatial_attn,
        })
    }

    pub fn anchored_ids(&self) -> Vec<ParamId> {
        let mut v = self.spatial_ln.param_ids();
        v.extend(self.spatial_attn.param_ids());
        v
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.proj_spatial.param_ids();
        v.extend(self.temporal_ln.param_ids());
        v.extend(self.temporal_attn.param_ids());
        v.extend(self.anchored_ids());
        v
    }

    /// One block on stacked clips. `v_branch` and `v_s` hold patch rows
    /// (frame-major); `tmp` holds one row per clip.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        v_branch: Var,
        v_s: Var,
        tmp: Var,
        geom: &BranchGeometry,
        alpha: f64,
        temporal_attention: bool,
    ) -> Result<(Var, Var), VideoError> {
        let fused = tape.add(v_branch, self.proj_spatial.forward(tape, store, v_s));
        let (x, tmp) = if temporal_attention {
            let copies = tape.gather_rows(tmp, geom.tmp_copy_rows.clone());
            let seq = tape.concat_rows(&[fused, copies]);
            let h = self.temporal_ln.forward(tape, store, seq);
            let a = self.temporal_attn.forward(tape, store, h, h, &geom.temporal_layout)?;
            let n_tok = geom.patch_rows();
            let x = tape.add(fused, tape.slice_rows(a, 0, n_tok));
            let tmp_delta = tape.group_mean(tape.slice_rows(a, n_tok, geom.clips() * geom.patches), geom.tmp_groups.clone());
            (x, tape.add(tmp, tmp_delta))
        } else {
            (fused, tmp)
        };
        let ln = LayerNormVars {
            gain: swa_param(tape, store, self.spatial_ln.gain, alpha),
            bias: swa_param(tape, store, self.spatial_ln.bias, alpha),
        };
        let sa = &self.spatial_attn;
        let vars = AttentionVars {
            wq: swa_linear(tape, store, &sa.wq, alpha),
            wk: swa_linear(tape, store, &sa.wk, alpha),
            wv: swa_linear(tape, store, &sa.wv, alpha),
            wo: swa_linear(tape, store, &sa.wo, alpha),
        };
        let h = LayerNorm::apply(tape, ln, x);
        let s = sa.apply(tape, &vars, h, h, &geom.spatial_layout)?;
        Ok((tape.add(x, s), tmp))
    }
}

/// Row bookkeeping for a stack of clips with `P` patches per frame.
#[derive(Clone, Debug)]
pub struct BranchGeometry {
    pub patches: usize,
    /// First global frame of each clip, plus the total at the end.
    pub clip_offsets: Vec<usize>,
    pub tmp_copy_rows: Rc<Vec<usize>>,
    pub tmp_groups: Rc<Vec<Vec<usize>>>,
    pub temporal_layout: AttnLayout,
    pub spatial_layout: AttnLayout,
    /// Frame position inside its clip, per patch row.
    pub frame_positions: Rc<Vec<usize>>,
}

impl BranchGeometry {
    pub fn new(clip_lens: &[usize], patches: usize) -> Self {
        let mut clip_offsets = vec![0];
        for &l in clip_lens {
            clip_offsets.push(clip_offsets.last().unwrap() + l);
        }
        let n_frames = *clip_offsets.last().unwrap();
        let n_tok = n_frames * patches;
        let n_clips = clip_lens.len();
        let mut temporal = Vec::with_capacity(n_clips * patches);
        let mut tmp_copy_rows = Vec::with_capacity(n_clips * patches);
        for c in 0..n_clips {
            for p in 0..patches {
                let mut g: Vec<usize> = (clip_offsets[c]..clip_offsets[c + 1]).map(|f| f * patches + p).collect();
                g.push(n_tok + c * patches + p);
                temporal.push(g);
                tmp_copy_rows.push(c);
            }
        }
        let tmp_groups = (0..n_clips).map(|c| (c * patches..(c + 1) * patches).collect()).collect();
        let spatial = (0..n_frames).map(|f| (f * patches..(f + 1) * patches).collect()).collect();
        let mut frame_positions = Vec::with_capacity(n_tok);
        for c in 0..n_clips {
            for f in 0..clip_lens[c] {
                frame_positions.extend(std::iter::repeat_n(f, patches));
            }
        }
        Self {
            patches,
            clip_offsets,
            tmp_copy_rows: Rc::new(tmp_copy_rows),
            tmp_groups: Rc::new(tmp_groups),
            temporal_layout: AttnLayout::Grouped(temporal),
            spatial_layout: AttnLayout::Grouped(spatial),
            frame_positions: Rc::new(frame_positions),
        }
    }

    pub fn clips(&self) -> usize {
        self.clip_offsets.len() - 1
    }

    pub fn frames(&self) -> usize {
        *self.clip_offsets.last().unwrap()
    }

    pub fn patch_rows(&self) -> usize {
        self.frames() * self.patches
    }

    /// Per clip: its frames as global indices.
    pub fn clip_frames(&self, c: usize) -> std::ops::Range<usize> {
        self.clip_offsets[c]..self.clip_offsets[c + 1]
    }
}

/// Everything the branch produced for a stack of clips.
#[derive(Clone, Debug)]
pub struct BranchOutput {
    /// Final branch patch tokens, `frames·P × d_vis`; absent when T = 0.
    pub tokens: Option<Var>,
    /// Final TMP rows, `clips × d_vis`; absent when T = 0.
    pub tmp: Option<Var>,
    /// Unnormalized clip embeddings, `clips × D`.
    pub pooled: Var,
}

#[derive(Clone, Debug)]
pub struct VideoEncoder {
    pub config: VideoEncoderConfig,
    /// Absent when the branch is disabled.
    pub temporal_positional: Option<ParamId>,
    pub blocks: Vec<TemporalBlock>,
}

impl VideoEncoder {
    pub fn new(store: &mut ParamStore, bb: &Backbones, config: VideoEncoderConfig, seed: u64) -> Result<Self, VideoError> {
        config.swa.validate()?;
        if config.frames_per_clip == 0 || config.eval_clips == 0 {
            return Err(VideoError::Config("frames_per_clip and eval_clips must be positive".into()));
        }
        let s = bb.vision.layers();
        let t = config.blocks;
        if t > s {
            return Err(VideoError::TapIndex { index: t, layers: s });
        }
        let d = bb.vision.width;
        let (temporal_positional, blocks) = if config.active_blocks() > 0 {
            let pos = seeded_normal(config.frames_per_clip, d, derive_seed(seed, "video.temporal_positional"), config.temporal_pos_std);
            let id = store.add("video.temporal_positional", pos, true)?;
            let blocks = (1..=t).map(|i| TemporalBlock::new(store, bb, i, s - t + i, seed)).collect::<Result<Vec<_>, _>>()?;
            // The last block's spatial output only reaches the patch tokens,
            // which the embedding never reads; it cannot receive a gradient.
            if let Some(last) = blocks.last() {
                for id in last.anchored_ids() {
                    store.set_trainable(id, false);
                }
            }
            (Some(id), blocks)
        } else {
            (None, Vec::new())
        };
        Ok(Self {
            config,
            temporal_positional,
            blocks,
        })
    }

    /// Backbone layer whose output is the branch entry.
    pub fn entry_layer(&self) -> Option<usize> {
        self.blocks.first().map(|b| b.tap_layer - 1)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.temporal_positional.into_iter().collect();
        for b in &self.blocks {
            v.extend(b.param_ids());
        }
        v
    }

    /// One α per block for a forward pass.
    pub fn alphas(&self, mode: SwaMode, rng: &mut dyn RngCore) -> Result<Vec<f64>, VideoError> {
        self.blocks.iter().map(|_| swa_alpha(self.config.swa.lambda, mode, rng)).collect()
    }

    /// Deterministic α for inference.
    pub fn inference_alphas(&self) -> Vec<f64> {
        let mut none = ChaCha8Rng::seed_from_u64(0);
        self.alphas(self.config.swa.inference_mode(), &mut none).expect("lambda validated at construction")
    }

    /// `coeff · Σ‖θ_ft − θ_frozen‖²` over anchored weights; None when disabled.
    pub fn anchor_penalty(&self, tape: &Tape, store: &ParamStore) -> Option<Var> {
        let coeff = self.config.swa.anchor_l2_coeff;
        if coeff == 0.0 || self.blocks.is_empty() {
            return None;
        }
        let terms: Vec<Var> = self
            .blocks
            .iter()
            .flat_map(|b| b.anchored_ids())
            .filter_map(|id| {
                let p = store.get(id);
                let fz = p.frozen_snapshot.as_ref()?;
                let diff = tape.axpby(1.0, tape.param(store, id), -1.0, tape.constant(fz.clone()));
                Some(tape.sum_all(tape.mul(diff, diff)))
            })
            .collect();
        Some(tape.scale(tape.add_n(&terms), coeff))
    }

    fn vision_trainable(store: &ParamStore, bb: &Backbones) -> bool {
        bb.vision.param_ids().iter().any(|&id| store.get(id).trainable)
    }

    /// Runs backbone and branch over stacked clips.
    pub fn forward_branch(
        &self,
        tape: &Tape,
        store: &ParamStore,
        bb: &Backbones,
        clips: &[Vec<&Mat>],
        alphas: &[f64],
        cache: Option<&TapCache>,
    ) -> Result<BranchOutput, VideoError> {
        if clips.is_empty() || clips.iter().any(Vec::is_empty) {
            return Err(VideoError::EmptyVideo);
        }
        if alphas.len() != self.blocks.len() {
            return Err(VideoError::Config(format!("{} alphas for {} blocks", alphas.len(), self.blocks.len())));
        }
        let max = self.config.frames_per_clip;
        if let Some(c) = clips.iter().find(|c| c.len() > max) {
            return Err(VideoError::ClipTooLong { got: c.len(), max });
        }
        let vision = &bb.vision;
        let t_tok = vision.tokens_per_frame();
        let patches = t_tok - 1;
        let lens: Vec<usize> = clips.iter().map(Vec::len).collect();
        let geom = BranchGeometry::new(&lens, patches);
        let all: Vec<&Mat> = clips.iter().flatten().copied().collect();
        let n_frames = all.len();
        let first_layer = self.entry_layer().unwrap_or(vision.layers());

        // Backbone activations: on the tape when the backbone trains, else cached constants.
        let (layer_vars, cls_proj): (Vec<Var>, Var) = if Self::vision_trainable(store, bb) {
            let owned: Vec<Mat> = all.iter().map(|m| (*m).clone()).collect();
            let st = vision.forward_frames(tape, store, &owned)?;
            (st.layers[first_layer..].to_vec(), st.cls_projection)
        } else {
            let taps: Vec<Arc<FrameTaps>> = match cache {
                Some(c) => c.taps(vision, store, tape.precision(), &all)?,
                None => {
                    let owned: Vec<Mat> = all.iter().map(|m| (*m).clone()).collect();
                    vision.clip_encode_frames(store, tape.precision(), &owned)?.into_iter().map(Arc::new).collect()
                }
            };
            let stack = |l: usize| {
                let mut data = Vec::with_capacity(n_frames * t_tok * vision.width);
                for ft in &taps {
                    data.extend_from_slice(ft.taps[l].data());
                }
                tape.constant(Mat::from_vec(n_frames * t_tok, vision.width, data))
            };
            let layers = (first_layer..=vision.layers()).map(stack).collect();
            let proj = Mat::from_vec(
                n_frames,
                vision.joint_dim,
                taps.iter().flat_map(|t| t.cls_projection.iter().copied()).collect(),
            );
            (layers, tape.constant(proj))
        };

        let clip_groups = |base: usize| -> Rc<Vec<Vec<usize>>> {
            Rc::new((0..geom.clips()).map(|c| geom.clip_frames(c).map(|f| base + f).collect()).collect())
        };

        if self.blocks.is_empty() {
            let pooled = tape.group_mean(cls_proj, clip_groups(0));
            return Ok(BranchOutput {
                tokens: None,
                tmp: None,
                pooled,
            });
        }

        let patch_idx: Rc<Vec<usize>> = Rc::new((0..n_frames).flat_map(|f| (0..patches).map(move |p| f * t_tok + 1 + p)).collect());
        let cls_idx: Rc<Vec<usize>> = Rc::new((0..n_frames).map(|f| f * t_tok).collect());
        let entry = layer_vars[0];
        let pos = tape.param(store, self.temporal_positional.expect("branch has positions"));
        let mut v = tape.add(tape.gather_rows(entry, patch_idx.clone()), tape.gather_rows(pos, geom.frame_positions.clone()));
        let mut tmp = tape.group_mean(tape.gather_rows(entry, cls_idx), clip_groups(0));
        let temporal = !self.config.disable_temporal_attention;
        for (i, (b, &alpha)) in self.blocks.iter().zip(alphas).enumerate() {
            let v_s = tape.gather_rows(layer_vars[i + 1], patch_idx.clone());
            (v, tmp) = b.forward(tape, store, v, v_s, tmp, &geom, alpha, temporal)?;
        }
        let tmp_proj = vision.project_cls(tape, store, tmp);
        let rows = tape.concat_rows(&[tmp_proj, cls_proj]);
        let n = geom.clips();
        let groups: Vec<Vec<usize>> = (0..n)
            .map(|c| std::iter::once(c).chain(geom.clip_frames(c).map(|f| n + f)).collect())
            .collect();
        let pooled = tape.group_mean(rows, Rc::new(groups));
        Ok(BranchOutput {
            tokens: Some(v),
            tmp: Some(tmp),
            pooled,
        })
    }

    /// Unit-norm embeddings of videos, each given as one or more clips;
    /// clip embeddings are averaged before normalization.
    pub fn encode_videos(
        &self,
        tape: &Tape,
        store: &ParamStore,
        bb: &Backbones,
        videos: &[Vec<Vec<&Mat>>],
        alphas: &[f64],
        cache: Option<&TapCache>,
    ) -> Result<Var, VideoError> {
        let clips: Vec<Vec<&Mat>> = videos.iter().flatten().cloned().collect();
        if videos.iter().any(Vec::is_empty) {
            return Err(VideoError::EmptyVideo);
        }
        let out = self.forward_branch(tape, store, bb, &clips, alphas, cache)?;
        let mut groups = Vec::with_capacity(videos.len());
        let mut next = 0;
        for v in videos {
            groups.push((next..next + v.len()).collect());
            next += v.len();
        }
        let pooled = if videos.len() == clips.len() { out.pooled } else { tape.group_mean(out.pooled, Rc::new(groups)) };
        Ok(tape.l2_normalize_rows(pooled))
    }

    /// Inference embedding of a full video: eval clip sampling and
    /// deterministic interpolation weights.
    pub fn embed_video(
        &self,
        store: &ParamStore,
        bb: &Backbones,
        precision: Precision,
        video_id: &str,
        frames: &[Mat],
        cache: Option<&TapCache>,
    ) -> Result<VideoEmbedding, VideoError> {
        let mut out = self.embed_videos(store, bb, precision, &[(video_id, frames)], cache)?;
        Ok(out.pop().expect("one video"))
    }

    pub fn embed_videos(
        &self,
        store: &ParamStore,
        bb: &Backbones,
        precision: Precision,
        videos: &[(&str, &[Mat])],
        cache: Option<&TapCache>,
    ) -> Result<Vec<VideoEmbedding>, VideoError> {
        if videos.is_empty() {
            return Ok(Vec::new());
        }
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let mut clip_sets = Vec::with_capacity(videos.len());
        let mut used = Vec::with_capacity(videos.len());
        for (_, frames) in videos {
            let idx = sample_frames(frames.len(), self.config.frames_per_clip, self.config.eval_clips, SampleMode::Eval, &mut unused)?;
            used.push(idx.iter().map(Vec::len).sum());
            clip_sets.push(idx.iter().map(|c| c.iter().map(|&i| &frames[i]).collect::<Vec<_>>()).collect::<Vec<_>>());
        }
        let tape = Tape::inference(precision);
        let emb = self.encode_videos(&tape, store, bb, &clip_sets, &self.inference_alphas(), cache)?;
        let m = tape.value(emb);
        Ok(videos
            .iter()
            .zip(used)
            .enumerate()
            .map(|(i, ((id, _), frames_used))| VideoEmbedding {
                vector: m.row(i).to_vec(),
                video_id: (*id).to_string(),
                frames_used,
            })
            .collect())
    }
}
