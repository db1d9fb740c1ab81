//! Scores and the multi-label objectives.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::nn::mat::dot;
use crate::nn::tape::log_sigmoid;
use crate::nn::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    MultilabelBce,
    SingleLabelCe,
}

/// Weight of the negative terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeWeight {
    Fixed(f64),
    /// `w = |𝒫| / |𝒩|` over the pairs of each batch.
    Balanced,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub negative_weight: NegativeWeight,
    pub kind: LossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.05,
            negative_weight: NegativeWeight::Fixed(1.0),
            kind: LossKind::MultilabelBce,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(TrainError::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if let NegativeWeight::Fixed(w) = self.negative_weight {
            if !(w > 0.0 && w.is_finite()) {
                return Err(TrainError::Config(format!("negative weight must be positive, got {w}")));
            }
        }
        Ok(())
    }

    /// Effective `w` for a batch with the given 0/1 targets.
    pub fn resolve_weight(&self, targets: &[f64]) -> f64 {
        match self.negative_weight {
            NegativeWeight::Fixed(w) => w,
            NegativeWeight::Balanced => {
                let pos = targets.iter().filter(|&&t| t > 0.5).count();
                let neg = targets.len() - pos;
                if pos == 0 || neg == 0 {
                    1.0
                } else {
                    pos as f64 / neg as f64
                }
            }
        }
    }
}

/// Inner product of two unit vectors.
pub fn score(label: &[f64], video: &[f64]) -> f64 {
    dot(label, video)
}

/// `−Σ [t·log σ(s/τ) + w·(1−t)·log(1−σ(s/τ))]` in log-sigmoid form.
pub fn bce_loss(scores: &[f64], targets: &[f64], temperature: f64, w: f64) -> f64 {
    scores
        .iter()
        .zip(targets)
        .map(|(&s, &t)| {
            let z = s / temperature;
            -(t * log_sigmoid(z) + w * (1.0 - t) * log_sigmoid(-z))
        })
        .sum()
}

/// Softmax cross entropy over each row of `scores` (`videos × classes`),
/// summed over videos. Each row needs exactly one positive.
pub fn cross_entropy_loss(scores: &[f64], targets: &[f64], classes: usize, temperature: f64) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for (row, t) in scores.chunks(classes).zip(targets.chunks(classes)) {
        let pos = single_positive(t)?;
        let z: Vec<f64> = row.iter().map(|s| s / temperature).collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - z[pos];
    }
    Ok(total)
}

fn single_positive(t: &[f64]) -> Result<usize, TrainError> {
    let pos: Vec<usize> = t.iter().enumerate().filter(|(_, &x)| x > 0.5).map(|(i, _)| i).collect();
    match pos.as_slice() {
        [p] => Ok(*p),
        _ => Err(TrainError::SingleLabel(pos.len())),
    }
}

/// Loss node for `logits` (`videos × classes`, already divided by τ).
pub fn loss_on_tape(tape: &Tape, logits: Var, targets: &[f64], cfg: &LossConfig) -> Result<Var, TrainError> {
    let (rows, classes) = tape.shape(logits);
    match cfg.kind {
        LossKind::MultilabelBce => {
            let w = cfg.resolve_weight(targets);
            let weights = targets.iter().map(|&t| if t > 0.5 { 1.0 } else { w }).collect();
            Ok(tape.bce_with_logits(logits, Rc::new(targets.to_vec()), Rc::new(weights)))
        }
        LossKind::SingleLabelCe => {
            let terms = (0..rows)
                .map(|r| {
                    let pos = single_positive(&targets[r * classes..(r + 1) * classes])?;
                    Ok(tape.softmax_ce(tape.slice_rows(logits, r, 1), pos))
                })
                .collect::<Result<Vec<_>, TrainError>>()?;
            Ok(tape.add_n(&terms))
        }
    }
}
