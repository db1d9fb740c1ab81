//! Finite-difference verification of tape gradients.

use super::mat::Mat;
use super::param::{ParamId, ParamStore};
use super::tape::{Precision, Tape, Var};
use super::NnError;

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub param: String,
    pub max_rel_error: f64,
    pub coords: Vec<CoordCheck>,
}

/// Compares the backpropagated gradient of `loss_fn` with respect to `param`
/// against central differences at the sampled coordinates, in 64-bit mode.
///
/// `loss_fn` builds the loss on the tape it is handed and must read the
/// parameter through [`Tape::param`]; the checker binds perturbed copies of the
/// parameter before each call. Relative error is
/// `|g_backprop − g_fd| / (|g_fd| + 1e-12)`.
pub fn finite_diff_grad_check<F, E>(
    store: &ParamStore,
    param: ParamId,
    epsilon: f64,
    coords: &[usize],
    loss_fn: F,
) -> Result<GradCheckReport, E>
where
    F: Fn(&Tape) -> Result<Var, E>,
    E: From<NnError>,
{
    let base = store.values(param).clone();
    if let Some(&bad) = coords.iter().find(|&&c| c >= base.len()) {
        return Err(NnError::Shape(format!("coordinate {bad} outside parameter of {} elements", base.len())).into());
    }
    let eval = |values: Mat, want_grad: bool| -> Result<(f64, Option<Mat>), E> {
        let tape = Tape::new(Precision::F64);
        let v = tape.bind_param(param, values);
        let loss = loss_fn(&tape)?;
        let value = tape.scalar(loss);
        let grad = if want_grad {
            let g = tape.backward(loss)?;
            Some(g.wrt(v).cloned().unwrap_or_else(|| Mat::zeros(base.rows(), base.cols())))
        } else {
            None
        };
        Ok((value, grad))
    };

    let (l0, grad) = eval(base.clone(), true)?;
    let (l1, _) = eval(base.clone(), false)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(NnError::LossNotReproducible.into());
    }
    let grad = grad.expect("gradient requested");

    let mut out = Vec::with_capacity(coords.len());
    for &c in coords {
        let mut plus = base.clone();
        plus.data_mut()[c] += epsilon;
        let mut minus = base.clone();
        minus.data_mut()[c] -= epsilon;
        let (lp, _) = eval(plus, false)?;
        let (lm, _) = eval(minus, false)?;
        let numeric = (lp - lm) / (2.0 * epsilon);
        let analytic = grad.data()[c];
        out.push(CoordCheck {
            index: c,
            analytic,
            numeric,
            rel_error: (analytic - numeric).abs() / (numeric.abs() + 1e-12),
        });
    }
    Ok(GradCheckReport {
        param: store.get(param).name.clone(),
        max_rel_error: out.iter().map(|c| c.rel_error).fold(0.0, f64::max),
        coords: out,
    })
}

/// Picks the `n` coordinates of the largest-magnitude analytic gradient.
/// Coordinates with near-zero gradient make relative errors meaningless, so
/// checks usually sample among the informative ones.
pub fn top_gradient_coords<F, E>(store: &ParamStore, param: ParamId, n: usize, loss_fn: F) -> Result<Vec<usize>, E>
where
    F: Fn(&Tape) -> Result<Var, E>,
    E: From<NnError>,
{
    let tape = Tape::new(Precision::F64);
    let v = tape.bind_param(param, store.values(param).clone());
    let loss = loss_fn(&tape)?;
    let g = tape.backward(loss)?;
    let Some(g) = g.wrt(v) else { return Ok(Vec::new()) };
    let mut idx: Vec<usize> = (0..g.len()).collect();
    idx.sort_by(|&a, &b| g.data()[b].abs().total_cmp(&g.data()[a].abs()).then(a.cmp(&b)));
    idx.truncate(n);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::seeded_normal;
    use crate::nn::layers::{AttentionSpec, InitOpts, TransformerBlock};
    use std::cell::Cell;

    #[test]
    fn quadratic_loss_gradient_is_exact() {
        let mut store = ParamStore::new();
        let p = store.add("p", Mat::from_vec(1, 3, vec![0.5, -1.5, 2.0]), true).unwrap();
        let report = finite_diff_grad_check(&store, p, 1e-5, &[0, 1, 2], |t: &Tape| -> Result<Var, NnError> {
            let v = t.param(&store, p);
            let sq = t.mul(v, v);
            Ok(t.scale(t.sum_all(sq), 0.5))
        })
        .unwrap();
        for c in &report.coords {
            assert_eq!(c.analytic, store.values(p).data()[c.index]);
        }
        assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        let mut store = ParamStore::new();
        let p = store.add("p", Mat::from_vec(1, 1, vec![1.0]), true).unwrap();
        let calls = Cell::new(0.0);
        let r = finite_diff_grad_check(&store, p, 1e-5, &[0], |t: &Tape| -> Result<Var, NnError> {
            calls.set(calls.get() + 1.0);
            let v = t.param(&store, p);
            Ok(t.scale(t.sum_all(v), calls.get()))
        });
        assert!(matches!(r, Err(NnError::LossNotReproducible)));
    }

    #[test]
    fn transformer_block_gradients_match_to_1e6() {
        let mut store = ParamStore::new();
        let spec = AttentionSpec::new(2, 8, false).unwrap();
        let blk = TransformerBlock::new(&mut store, "b", spec, 2, InitOpts::new(5, true)).unwrap();
        let x = seeded_normal(4, 8, 1, 1.0);
        let target = seeded_normal(4, 8, 2, 1.0);
        let loss = |t: &Tape| -> Result<Var, NnError> {
            let y = blk.forward(t, &store, t.constant(x.clone()))?;
            let tv = t.constant(target.clone());
            Ok(t.sum_all(t.mul(y, tv)))
        };
        for id in [blk.attn.wq.weight, blk.attn.wo.weight, blk.mlp.fc1.weight, blk.ln1.gain] {
            let coords: Vec<usize> = top_gradient_coords(&store, id, 4, loss).unwrap();
            let r = finite_diff_grad_check(&store, id, 1e-5, &coords, loss).unwrap();
            assert!(r.max_rel_error < 1e-6, "{}: {}", r.param, r.max_rel_error);
        }
    }
}
