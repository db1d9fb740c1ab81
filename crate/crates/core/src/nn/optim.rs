//! AdamW with decoupled weight decay, and a warmup + cosine schedule.

use std::collections::HashMap;

use super::mat::Mat;
use super::param::{ParamGroup, ParamId, ParamStore};
use super::tape::Gradients;
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decay for freshly initialized weights.
    pub weight_decay: f64,
    /// Decay for weights initialized from a pretrained backbone.
    pub weight_decay_backbone_init: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-7,
            weight_decay_backbone_init: 0.0,
        }
    }
}

struct Moments {
    m: Mat,
    v: Mat,
}

pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    state: HashMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            state: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter. Parameters without a gradient
    /// are treated as having a zero gradient. Frozen parameters are skipped.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<(), NnError> {
        let grads: HashMap<ParamId, &Mat> = grads.params().collect();
        self.step_with(store, |id| grads.get(&id).copied(), lr)
    }

    pub fn step_with<'g>(
        &mut self,
        store: &mut ParamStore,
        grad_of: impl Fn(ParamId) -> Option<&'g Mat>,
        lr: f64,
    ) -> Result<(), NnError> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(NnError::InvalidLearningRate(lr));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for id in store.trainable_ids() {
            let wd = match store.get(id).group {
                ParamGroup::New => c.weight_decay,
                ParamGroup::BackboneInit => c.weight_decay_backbone_init,
            };
            let (rows, cols) = store.get(id).shape();
            let g = grad_of(id);
            if let Some(g) = g {
                if g.shape() != (rows, cols) {
                    return Err(NnError::Shape(format!("gradient shape for {}", store.get(id).name)));
                }
            }
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: Mat::zeros(rows, cols),
                v: Mat::zeros(rows, cols),
            });
            let values = store.values_mut(id)?;
            let n = values.len();
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let m = &mut st.m.data_mut()[i];
                *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
                let mi = *m;
                let v = &mut st.v.data_mut()[i];
                *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
                let vi = *v;
                let p = &mut values.data_mut()[i];
                *p *= 1.0 - lr * wd;
                *p -= lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupCosine {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl WarmupCosine {
    /// Learning rate used for step `step` (0-based). Never returns exactly zero.
    pub fn lr(&self, step: u64) -> f64 {
        let lr = if step < self.warmup_steps {
            self.base_lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
            let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
            0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
        };
        lr.max(self.base_lr * 1e-3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(v: f64, trainable: bool) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Mat::from_vec(1, 2, vec![v, -v]), trainable).unwrap();
        (s, id)
    }

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig {
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let (mut s, id) = store_with(0.7, true);
        let before = s.values(id).clone();
        let mut opt = AdamW::new(cfg(0.0));
        opt.step_with(&mut s, |_| None, 1e-2).unwrap();
        assert!(s.values(id).bit_eq(&before));
    }

    #[test]
    fn decay_shrinks_by_lr_times_wd() {
        let (mut s, id) = store_with(0.7, true);
        let mut opt = AdamW::new(cfg(0.1));
        opt.step_with(&mut s, |_| None, 1e-2).unwrap();
        let expect = 0.7 * (1.0 - 1e-2 * 0.1);
        assert!((s.values(id).data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = store_with(0.0, true);
        let g = Mat::from_vec(1, 2, vec![1.0, 1.0]);
        let mut opt = AdamW::new(cfg(0.0));
        opt.step_with(&mut s, |_| Some(&g), 1e-3).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
        let expect = -1e-3 / (1.0 + 1e-8);
        assert!((s.values(id).data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn frozen_untouched_and_bad_lr_rejected() {
        let (mut s, id) = store_with(0.5, false);
        let g = Mat::from_vec(1, 2, vec![1.0, 1.0]);
        let mut opt = AdamW::new(cfg(0.1));
        opt.step_with(&mut s, |_| Some(&g), 1e-2).unwrap();
        assert!(s.frozen_violations().is_empty());
        assert_eq!(s.values(id).data()[0], 0.5);
        assert!(matches!(opt.step_with(&mut s, |_| None, 0.0), Err(NnError::InvalidLearningRate(_))));
        assert!(opt.step_with(&mut s, |_| None, -1.0).is_err());
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = WarmupCosine {
            base_lr: 1.0,
            warmup_steps: 10,
            total_steps: 110,
        };
        assert!((s.lr(0) - 0.1).abs() < 1e-12);
        assert!((s.lr(9) - 1.0).abs() < 1e-12);
        assert!((s.lr(60) - 0.5).abs() < 1e-12);
        assert!(s.lr(109) < 0.01);
        assert!(s.lr(500) > 0.0);
    }
}
