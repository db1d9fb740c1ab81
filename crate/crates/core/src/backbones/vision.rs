//! Frame encoder with per-layer activation taps.
//!
//! A frame is a `G² × patch_dim` matrix of patch vectors. Token rows are laid
//! out as `[CLS, patch₀, …, patch_{G²−1}]`; several frames are stacked
//! frame-major and attend only within their own frame.

use std::rc::Rc;

use super::{BackboneConfig, BackboneError};
use crate::nn::init::{derive_seed, seeded_normal};
use crate::nn::layers::embedding_table;
use crate::nn::{
    AttentionSpec, AttnLayout, InitOpts, InitScheme, LayerNorm, Linear, Mat, ParamId, ParamStore, Precision, Tape,
    TransformerBlock, Var,
};

#[derive(Clone, Debug)]
pub struct ToyVisionBackbone {
    pub patch_embed: Linear,
    pub cls_token: ParamId,
    pub positional: ParamId,
    pub ln_pre: LayerNorm,
    pub blocks: Vec<TransformerBlock>,
    pub ln_post: LayerNorm,
    pub projection: ParamId,
    pub grid: usize,
    pub patch_dim: usize,
    pub width: usize,
    pub joint_dim: usize,
}

/// Frozen activations of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTaps {
    /// `taps[0]` is the embedded input, `taps[l]` the output of layer `l`; each `(1+G²) × d_vis`.
    pub taps: Vec<Mat>,
    /// `ln_post(CLS_S)·proj`, before normalization.
    pub cls_projection: Vec<f64>,
    /// Unit-norm frame embedding.
    pub embedding: Vec<f64>,
}

/// Taps of a stack of frames recorded on a tape.
#[derive(Clone, Debug)]
pub struct StackedTaps {
    /// One `(F·(1+G²)) × d_vis` node per layer, `0..=S`.
    pub layers: Vec<Var>,
    /// `F × joint_dim`, unnormalized.
    pub cls_projection: Var,
}

impl ToyVisionBackbone {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig, opts: InitOpts) -> Result<Self, BackboneError> {
        let d = cfg.d_vis;
        let tokens = 1 + cfg.grid * cfg.grid;
        let patch_embed = Linear::new(store, "vision.patch_embed", cfg.patch_dim, d, InitScheme::NormalScaled, opts)?;
        let cls_token = embedding_table(store, "vision.cls_token", 1, d, 1.0, opts)?;
        let positional = embedding_table(store, "vision.positional", tokens, d, 0.5, opts)?;
        let ln_pre = LayerNorm::new(store, "vision.ln_pre", d, opts)?;
        let spec = AttentionSpec::new(cfg.heads, d, false)?;
        let blocks = (0..cfg.vision_layers)
            .map(|l| TransformerBlock::new(store, &format!("vision.layer{}", l + 1), spec, 4, opts))
            .collect::<Result<Vec<_>, _>>()?;
        let ln_post = LayerNorm::new(store, "vision.ln_post", d, opts)?;
        let proj = seeded_normal(d, cfg.joint_dim, derive_seed(opts.seed, "vision.projection"), 1.0 / (d as f64).sqrt());
        let projection = store.add_in_group("vision.projection", proj, opts.trainable, opts.group)?;
        Ok(Self {
            patch_embed,
            cls_token,
            positional,
            ln_pre,
            blocks,
            ln_post,
            projection,
            grid: cfg.grid,
            patch_dim: cfg.patch_dim,
            width: d,
            joint_dim: cfg.joint_dim,
        })
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn tokens_per_frame(&self) -> usize {
        1 + self.grid * self.grid
    }

    pub fn frame_shape(&self) -> (usize, usize) {
        (self.grid * self.grid, self.patch_dim)
    }

    fn check_frame(&self, frame: &Mat) -> Result<(), BackboneError> {
        if frame.shape() != self.frame_shape() {
            return Err(BackboneError::FrameShape {
                expected: self.frame_shape(),
                got: frame.shape(),
            });
        }
        Ok(())
    }

    /// Row groups of `n_frames` stacked frames.
    pub fn frame_groups(&self, n_frames: usize) -> Vec<Vec<usize>> {
        let t = self.tokens_per_frame();
        (0..n_frames).map(|f| (f * t..(f + 1) * t).collect()).collect()
    }

    /// Runs every frame through the backbone on `tape`.
    pub fn forward_frames(&self, tape: &Tape, store: &ParamStore, frames: &[Mat]) -> Result<StackedTaps, BackboneError> {
        if frames.is_empty() {
            return Err(BackboneError::FrameShape {
                expected: self.frame_shape(),
                got: (0, 0),
            });
        }
        for f in frames {
            self.check_frame(f)?;
        }
        let n = frames.len();
        let t = self.tokens_per_frame();
        let pix = tape.constant(Mat::from_vec(
            n * (t - 1),
            self.patch_dim,
            frames.iter().flat_map(|f| f.data().iter().copied()).collect(),
        ));
        let patches = self.patch_embed.forward(tape, store, pix);
        let cls = tape.param(store, self.cls_token);
        // Interleave CLS rows with each frame's patches.
        let mut parts = Vec::with_capacity(2 * n);
        for f in 0..n {
            parts.push(cls);
            parts.push(tape.slice_rows(patches, f * (t - 1), t - 1));
        }
        let x = tape.concat_rows(&parts);
        let pos = tape.param(store, self.positional);
        let pos_all = tape.gather_rows(pos, Rc::new((0..n * t).map(|i| i % t).collect()));
        let mut h = self.ln_pre.forward(tape, store, tape.add(x, pos_all));
        let layout = AttnLayout::Grouped(self.frame_groups(n));
        let mut layers = vec![h];
        for b in &self.blocks {
            h = b.forward_with_layout(tape, store, h, &layout)?;
            layers.push(h);
        }
        let cls_rows = tape.gather_rows(h, Rc::new((0..n).map(|f| f * t).collect()));
        let cls_projection = self.project_cls(tape, store, cls_rows);
        Ok(StackedTaps { layers, cls_projection })
    }

    /// `ln_post(x)·proj` for each row of `x`, unnormalized.
    pub fn project_cls(&self, tape: &Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.ln_post.forward(tape, store, x);
        tape.matmul(h, tape.param(store, self.projection))
    }

    /// Inference encoding of one frame.
    pub fn clip_encode_frame(&self, store: &ParamStore, precision: Precision, frame: &Mat) -> Result<FrameTaps, BackboneError> {
        let mut out = self.clip_encode_frames(store, precision, std::slice::from_ref(frame))?;
        Ok(out.pop().expect("one frame"))
    }

    /// Inference encoding of independent frames in one stacked pass.
    pub fn clip_encode_frames(&self, store: &ParamStore, precision: Precision, frames: &[Mat]) -> Result<Vec<FrameTaps>, BackboneError> {
        let tape = Tape::inference(precision);
        let st = self.forward_frames(&tape, store, frames)?;
        let t = self.tokens_per_frame();
        let layer_vals: Vec<Rc<Mat>> = st.layers.iter().map(|&v| tape.value(v)).collect();
        let proj = tape.value(st.cls_projection);
        Ok((0..frames.len())
            .map(|f| {
                let taps = layer_vals
                    .iter()
                    .map(|m| Mat::from_vec(t, self.width, m.data()[f * t * self.width..(f + 1) * t * self.width].to_vec()))
                    .collect();
                let cls_projection = proj.row(f).to_vec();
                let embedding = crate::nn::mat::normalized(&cls_projection);
                FrameTaps {
                    taps,
                    cls_projection,
                    embedding,
                }
            })
            .collect())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.patch_embed.param_ids();
        v.extend([self.cls_token, self.positional]);
        v.extend(self.ln_pre.param_ids());
        for b in &self.blocks {
            v.extend(b.param_ids());
        }
        v.extend(self.ln_post.param_ids());
        v.push(self.projection);
        v
    }
}
