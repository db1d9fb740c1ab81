//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation of a forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! returns [`Gradients`] for every node that requires a gradient. Parameters
//! enter the tape through [`Tape::param`]; frozen parameters never require a
//! gradient, so no work is spent on them.
//!
//! Values are always stored as `f64`. In [`Precision::F32`] mode every op
//! output is rounded to the nearest `f32`, which reproduces single-precision
//! storage between ops. [`Precision::F64`] keeps full precision and is the mode
//! used for finite-difference checks.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::mat::{dot, Mat};
use super::param::{ParamId, ParamStore};
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One independent softmax-attention problem inside an attention op.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
    /// Row-major `queries.len() × keys.len()`; `true` means the key is visible.
    pub mask: Option<Vec<bool>>,
}

/// How queries see keys in [`Tape::attention`].
#[derive(Clone, Debug)]
pub enum AttnLayout {
    /// Every query sees every key, optionally filtered by an `S × S'` mask.
    Dense { mask: Option<Vec<bool>> },
    /// Query `i` sees keys `0..=i + (S' - S)`.
    Causal,
    /// Self-attention restricted to a partition of the rows; each group attends only within itself.
    Grouped(Vec<Vec<usize>>),
    /// Like `Grouped`, with causal order inside each group (group order is row order).
    GroupedCausal(Vec<Vec<usize>>),
    /// Explicit query/key sets. Every query row must belong to exactly one block.
    Blocks(Vec<AttnBlock>),
}

impl AttnLayout {
    fn blocks(&self, n_q: usize, n_k: usize) -> Vec<AttnBlock> {
        match self {
            AttnLayout::Dense { mask } => {
                if let Some(m) = mask {
                    assert_eq!(m.len(), n_q * n_k, "mask shape mismatch");
                }
                vec![AttnBlock {
                    queries: (0..n_q).collect(),
                    keys: (0..n_k).collect(),
                    mask: mask.clone(),
                }]
            }
            AttnLayout::Causal => {
                assert!(n_k >= n_q, "causal attention needs at least as many keys as queries");
                let offset = n_k - n_q;
                let mask = (0..n_q)
                    .flat_map(|i| (0..n_k).map(move |j| j <= i + offset))
                    .collect();
                vec![AttnBlock {
                    queries: (0..n_q).collect(),
                    keys: (0..n_k).collect(),
                    mask: Some(mask),
                }]
            }
            AttnLayout::Grouped(groups) => {
                assert_eq!(n_q, n_k, "grouped attention is self-attention");
                groups
                    .iter()
                    .map(|g| AttnBlock {
                        queries: g.clone(),
                        keys: g.clone(),
                        mask: None,
                    })
                    .collect()
            }
            AttnLayout::GroupedCausal(groups) => {
                assert_eq!(n_q, n_k, "grouped attention is self-attention");
                groups
                    .iter()
                    .map(|g| {
                        let n = g.len();
                        AttnBlock {
                            queries: g.clone(),
                            keys: g.clone(),
                            mask: Some((0..n).flat_map(|i| (0..n).map(move |j| j <= i)).collect()),
                        }
                    })
                    .collect()
            }
            AttnLayout::Blocks(blocks) => blocks.clone(),
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddN(Vec<Var>),
    AddRow(Var, Var),
    Axpby { a: Var, b: Var, alpha: f64, beta: f64 },
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, xhat: Mat, inv_std: Vec<f64> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        blocks: Rc<Vec<AttnBlock>>,
        probs: Vec<Mat>,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Rc<Vec<usize>>),
    MeanRows(Var),
    GroupMean(Var, Rc<Vec<Vec<usize>>>),
    SumAll(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    BceWithLogits {
        logits: Var,
        targets: Rc<Vec<f64>>,
        weights: Rc<Vec<f64>>,
    },
    SoftmaxCe { logits: Var, target: usize, probs: Vec<f64> },
}

struct Node {
    value: Rc<Mat>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward pass. Not `Sync`: every thread owns its own tape.
pub struct Tape {
    precision: Precision,
    grad_enabled: bool,
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, Var>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new(Precision::F32)
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu_gate(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    1.0 / (1.0 + (-2.0 * u).exp())
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Self {
            precision,
            grad_enabled: true,
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
        }
    }

    /// A tape on which nothing requires a gradient.
    pub fn inference(precision: Precision) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(precision)
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Rc<Mat> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.data()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn round(&self, mut m: Mat) -> Mat {
        if self.precision == Precision::F32 {
            for v in m.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        m
    }

    fn push(&self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let value = self.round(value);
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.grad_enabled && inputs.iter().any(|i| nodes[i.0].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Constant input.
    pub fn constant(&self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    /// Leaf node; `requires_grad` is ignored on inference tapes.
    pub fn leaf(&self, value: Mat, requires_grad: bool) -> Var {
        let value = self.round(value);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(nodes.len() - 1)
    }

    /// Loads a parameter. Each parameter is placed on the tape once; later
    /// calls return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.values.clone(), p.trainable);
        self.params.borrow_mut().insert(id, v);
        v
    }

    /// Substitutes `values` for a parameter on this tape (always requiring a
    /// gradient). Must be called before the parameter is first used.
    pub fn bind_param(&self, id: ParamId, values: Mat) -> Var {
        let v = self.leaf(values, true);
        let prev = self.params.borrow_mut().insert(id, v);
        assert!(prev.is_none(), "parameter bound after first use");
        v
    }

    /// Substitutes an existing node for a parameter.
    pub fn bind_param_var(&self, id: ParamId, var: Var) {
        let prev = self.params.borrow_mut().insert(id, var);
        assert!(prev.is_none(), "parameter bound after first use");
    }

    pub fn param_vars(&self) -> Vec<(ParamId, Var)> {
        self.params.borrow().iter().map(|(&k, &v)| (k, v)).collect()
    }

    // ---- elementary ops -------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(&self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(&self.value(b));
        self.push(out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let mut out = (*self.value(a)).clone();
        out.add_assign(&self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn add_n(&self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "add_n of nothing");
        let mut out = (*self.value(xs[0])).clone();
        for &x in &xs[1..] {
            out.add_assign(&self.value(x));
        }
        self.push(out, Op::AddN(xs.to_vec()), xs)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        let mut out = (*self.value(a)).clone();
        assert_eq!(r.shape(), (1, out.cols()), "add_row shape mismatch");
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    /// `alpha·a + beta·b`
    pub fn axpby(&self, alpha: f64, a: Var, beta: f64, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "axpby shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| alpha * x + beta * y).collect();
        let out = Mat::from_vec(va.rows(), va.cols(), data);
        self.push(out, Op::Axpby { a, b, alpha, beta }, &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Mat::from_vec(va.rows(), va.cols(), data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Multiplies every row of `a` elementwise by the `1 × n` row.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        let mut out = (*self.value(a)).clone();
        assert_eq!(r.shape(), (1, out.cols()), "mul_row shape mismatch");
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        // 0.5·(1 + tanh u) written as σ(2u); exp is far cheaper than tanh.
        let out = self.value(a).map(|x| x * gelu_gate(x));
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Per-row standardization (no affine part), epsilon 1e-5.
    pub fn layer_norm(&self, x: Var) -> Var {
        let vx = self.value(x);
        let n = vx.cols() as f64;
        let mut xhat = Mat::zeros(vx.rows(), vx.cols());
        let mut inv_std = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = xhat.clone();
        self.push(out, Op::LayerNorm { x, xhat, inv_std }, &[x])
    }

    /// Softmax attention `softmax(q·kᵀ·scale)·v` under `layout`.
    ///
    /// Fails with [`NnError::DegenerateMask`] when some query sees no key.
    pub fn attention(&self, q: Var, k: Var, v: Var, scale: f64, layout: &AttnLayout) -> Result<Var, NnError> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(vq.cols(), vk.cols(), "query/key width mismatch");
        assert_eq!(vk.rows(), vv.rows(), "key/value length mismatch");
        let blocks = layout.blocks(vq.rows(), vk.rows());
        let mut out = Mat::zeros(vq.rows(), vv.cols());
        let mut probs = Vec::with_capacity(blocks.len());
        for block in &blocks {
            let p = attention_probs(&vq, &vk, scale, block)?;
            for (bi, &qi) in block.queries.iter().enumerate() {
                let prow = p.row(bi);
                let orow = out.row_mut(qi);
                for (bj, &kj) in block.keys.iter().enumerate() {
                    let w = prow[bj];
                    if w == 0.0 {
                        continue;
                    }
                    for (o, x) in orow.iter_mut().zip(vv.row(kj)) {
                        *o += w * x;
                    }
                }
            }
            probs.push(p);
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                scale,
                blocks: Rc::new(blocks),
                probs,
            },
            &[q, k, v],
        ))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.rows(), "slice_rows out of range");
        let data = va.data()[start * va.cols()..(start + len) * va.cols()].to_vec();
        let out = Mat::from_vec(len, va.cols(), data);
        self.push(out, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.cols(), "slice_cols out of range");
        let mut out = Mat::zeros(va.rows(), len);
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_rows(&self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat_rows of nothing");
        let cols = self.shape(xs[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let vx = self.value(x);
            assert_eq!(vx.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(vx.data());
            rows += vx.rows();
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(xs.to_vec()), xs)
    }

    pub fn concat_cols(&self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat_cols of nothing");
        let rows = self.shape(xs[0]).0;
        let vals: Vec<Rc<Mat>> = xs.iter().map(|&x| self.value(x)).collect();
        let cols: usize = vals.iter().map(|m| m.cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for m in &vals {
                assert_eq!(m.rows(), rows, "concat_cols height mismatch");
                out.row_mut(r)[c0..c0 + m.cols()].copy_from_slice(m.row(r));
                c0 += m.cols();
            }
        }
        self.push(out, Op::ConcatCols(xs.to_vec()), xs)
    }

    /// Output row `i` is input row `idx[i]`; indices may repeat.
    pub fn gather_rows(&self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let va = self.value(a);
        let mut out = Mat::zeros(idx.len(), va.cols());
        for (i, &j) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(va.row(j));
        }
        self.push(out, Op::GatherRows(a, idx), &[a])
    }

    /// Column means as a `1 × n` row.
    pub fn mean_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = Mat::zeros(1, va.cols());
        for r in 0..va.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(va.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / va.rows() as f64;
        for o in out.data_mut() {
            *o *= inv;
        }
        self.push(out, Op::MeanRows(a), &[a])
    }

    /// Row `g` of the output is the mean of the input rows listed in
    /// `groups[g]`. Each column is summed in sorted order, so the result does
    /// not depend on the order of rows within a group.
    pub fn group_mean(&self, a: Var, groups: Rc<Vec<Vec<usize>>>) -> Var {
        let va = self.value(a);
        let mut out = Mat::zeros(groups.len(), va.cols());
        let mut buf = Vec::new();
        for (gi, g) in groups.iter().enumerate() {
            assert!(!g.is_empty(), "empty group in group_mean");
            for c in 0..va.cols() {
                buf.clear();
                buf.extend(g.iter().map(|&r| va.get(r, c)));
                buf.sort_by(f64::total_cmp);
                out.set(gi, c, buf.iter().sum::<f64>() / g.len() as f64);
            }
        }
        self.push(out, Op::GroupMean(a, groups), &[a])
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Mat::from_vec(1, 1, vec![s]), Op::SumAll(a), &[a])
    }

    /// Scales each row to unit L2 norm. Zero rows are left at zero.
    pub fn l2_normalize_rows(&self, x: Var) -> Var {
        let vx = self.value(x);
        let mut out = (*vx).clone();
        let mut norms = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let n = dot(vx.row(r), vx.row(r)).sqrt();
            if n > 0.0 {
                for o in out.row_mut(r) {
                    *o /= n;
                }
            }
            norms.push(n);
        }
        self.push(out, Op::L2NormalizeRows { x, norms }, &[x])
    }

    /// `-Σ_i weight_i · [t_i·log σ(z_i) + (1 − t_i)·log(1 − σ(z_i))]` over every
    /// element of `logits`, evaluated in log-sigmoid form.
    pub fn bce_with_logits(&self, logits: Var, targets: Rc<Vec<f64>>, weights: Rc<Vec<f64>>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.len(), targets.len(), "target count mismatch");
        assert_eq!(z.len(), weights.len(), "weight count mismatch");
        let loss: f64 = z
            .data()
            .iter()
            .zip(targets.iter())
            .zip(weights.iter())
            .map(|((&z, &t), &w)| -w * (t * log_sigmoid(z) + (1.0 - t) * log_sigmoid(-z)))
            .sum();
        self.push(
            Mat::from_vec(1, 1, vec![loss]),
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            },
            &[logits],
        )
    }

    /// Negative log-likelihood of `target` under a softmax over the `1 × n` logits row.
    pub fn softmax_ce(&self, logits: Var, target: usize) -> Var {
        let z = self.value(logits);
        assert_eq!(z.rows(), 1, "softmax_ce expects a row");
        assert!(target < z.cols(), "target out of range");
        let probs = softmax(z.data());
        let max = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z.data()[target];
        self.push(Mat::from_vec(1, 1, vec![loss]), Op::SoftmaxCe { logits, target, probs }, &[logits])
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.shape() != (1, 1) {
            return Err(NnError::Shape("backward requires a scalar loss".into()));
        }
        let mut grads: Vec<Option<Mat>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
        }
        let params = self.params.borrow().clone();
        Ok(Gradients { grads, params })
    }
}

fn attention_probs(q: &Mat, k: &Mat, scale: f64, block: &AttnBlock) -> Result<Mat, NnError> {
    let nk = block.keys.len();
    let mut p = Mat::zeros(block.queries.len(), nk);
    for (bi, &qi) in block.queries.iter().enumerate() {
        let qrow = q.row(qi);
        let prow = p.row_mut(bi);
        let mut max = f64::NEG_INFINITY;
        for (bj, &kj) in block.keys.iter().enumerate() {
            let visible = block.mask.as_ref().is_none_or(|m| m[bi * nk + bj]);
            if visible {
                let s = dot(qrow, k.row(kj)) * scale;
                prow[bj] = s;
                max = max.max(s);
            } else {
                prow[bj] = f64::NEG_INFINITY;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(NnError::DegenerateMask);
        }
        let mut sum = 0.0;
        for s in prow.iter_mut() {
            *s = if *s == f64::NEG_INFINITY { 0.0 } else { (*s - max).exp() };
            sum += *s;
        }
        for s in prow.iter_mut() {
            *s /= sum;
        }
    }
    Ok(p)
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `log σ(z)` without overflow for large `|z|`.
#[inline]
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Mat>], nodes: &[Node], v: Var, g: Mat) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
    let val = |v: Var| -> &Mat { &nodes[v.0].value };
    let needs = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if needs(*a) {
                accumulate(grads, nodes, *a, g.matmul_t(val(*b)));
            }
            if needs(*b) {
                accumulate(grads, nodes, *b, val(*a).t_matmul(g));
            }
        }
        Op::MatMulT(a, b) => {
            if needs(*a) {
                accumulate(grads, nodes, *a, g.matmul(val(*b)));
            }
            if needs(*b) {
                accumulate(grads, nodes, *b, g.t_matmul(val(*a)));
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::AddN(xs) => {
            for &x in xs {
                accumulate(grads, nodes, x, g.clone());
            }
        }
        Op::AddRow(a, row) => {
            accumulate(grads, nodes, *a, g.clone());
            if needs(*row) {
                let mut s = Mat::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in s.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, nodes, *row, s);
            }
        }
        Op::Axpby { a, b, alpha, beta } => {
            if needs(*a) {
                accumulate(grads, nodes, *a, g.scale(*alpha));
            }
            if needs(*b) {
                accumulate(grads, nodes, *b, g.scale(*beta));
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                let d = g.data().iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                accumulate(grads, nodes, *a, Mat::from_vec(g.rows(), g.cols(), d));
            }
            if needs(*b) {
                let d = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                accumulate(grads, nodes, *b, Mat::from_vec(g.rows(), g.cols(), d));
            }
        }
        Op::MulRow(a, row) => {
            let vr = val(*row);
            let va = val(*a);
            if needs(*a) {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    for (o, w) in d.row_mut(r).iter_mut().zip(vr.data()) {
                        *o *= w;
                    }
                }
                accumulate(grads, nodes, *a, d);
            }
            if needs(*row) {
                let mut s = Mat::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for ((o, gv), av) in s.data_mut().iter_mut().zip(g.row(r)).zip(va.row(r)) {
                        *o += gv * av;
                    }
                }
                accumulate(grads, nodes, *row, s);
            }
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, g.scale(*s)),
        Op::Gelu(a) => {
            let d = g
                .data()
                .iter()
                .zip(val(*a).data())
                .map(|(gv, &x)| {
                    let s = gelu_gate(x);
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    gv * (s + 2.0 * x * s * (1.0 - s) * du)
                })
                .collect();
            accumulate(grads, nodes, *a, Mat::from_vec(g.rows(), g.cols(), d));
        }
        Op::LayerNorm { x, xhat, inv_std } => {
            let n = g.cols() as f64;
            let mut d = Mat::zeros(g.rows(), g.cols());
            for r in 0..g.rows() {
                let gr = g.row(r);
                let xr = xhat.row(r);
                let mean_g = gr.iter().sum::<f64>() / n;
                let mean_gx = dot(gr, xr) / n;
                for ((o, gv), xv) in d.row_mut(r).iter_mut().zip(gr).zip(xr) {
                    *o = inv_std[r] * (gv - mean_g - xv * mean_gx);
                }
            }
            accumulate(grads, nodes, *x, d);
        }
        Op::Attention {
            q,
            k,
            v,
            scale,
            blocks,
            probs,
        } => {
            let (vq, vk, vv) = (val(*q), val(*k), val(*v));
            let mut dq = Mat::zeros(vq.rows(), vq.cols());
            let mut dk = Mat::zeros(vk.rows(), vk.cols());
            let mut dv = Mat::zeros(vv.rows(), vv.cols());
            for (block, p) in blocks.iter().zip(probs) {
                let nk = block.keys.len();
                for (bi, &qi) in block.queries.iter().enumerate() {
                    let go = g.row(qi);
                    let prow = p.row(bi);
                    // dP_j = go · v_j ; dS_j = P_j (dP_j − Σ P dP)
                    let mut dp = vec![0.0; nk];
                    let mut acc = 0.0;
                    for (bj, &kj) in block.keys.iter().enumerate() {
                        if prow[bj] == 0.0 {
                            continue;
                        }
                        dp[bj] = dot(go, vv.row(kj));
                        acc += prow[bj] * dp[bj];
                        let w = prow[bj];
                        for (o, x) in dv.row_mut(kj).iter_mut().zip(go) {
                            *o += w * x;
                        }
                    }
                    for (bj, &kj) in block.keys.iter().enumerate() {
                        let ds = prow[bj] * (dp[bj] - acc) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for (o, x) in dq.row_mut(qi).iter_mut().zip(vk.row(kj)) {
                            *o += ds * x;
                        }
                        for (o, x) in dk.row_mut(kj).iter_mut().zip(vq.row(qi)) {
                            *o += ds * x;
                        }
                    }
                }
            }
            accumulate(grads, nodes, *q, dq);
            accumulate(grads, nodes, *k, dk);
            accumulate(grads, nodes, *v, dv);
        }
        Op::SliceRows(a, start) => {
            let va = val(*a);
            let mut d = Mat::zeros(va.rows(), va.cols());
            let c = va.cols();
            d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
            accumulate(grads, nodes, *a, d);
        }
        Op::SliceCols(a, start) => {
            let va = val(*a);
            let mut d = Mat::zeros(va.rows(), va.cols());
            for r in 0..g.rows() {
                d.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::ConcatRows(xs) => {
            let mut r0 = 0;
            for &x in xs {
                let rows = val(x).rows();
                if needs(x) {
                    let c = g.cols();
                    let d = Mat::from_vec(rows, c, g.data()[r0 * c..(r0 + rows) * c].to_vec());
                    accumulate(grads, nodes, x, d);
                }
                r0 += rows;
            }
        }
        Op::ConcatCols(xs) => {
            let mut c0 = 0;
            for &x in xs {
                let cols = val(x).cols();
                if needs(x) {
                    let mut d = Mat::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        d.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + cols]);
                    }
                    accumulate(grads, nodes, x, d);
                }
                c0 += cols;
            }
        }
        Op::GatherRows(a, idx) => {
            let va = val(*a);
            let mut d = Mat::zeros(va.rows(), va.cols());
            for (i, &j) in idx.iter().enumerate() {
                for (o, x) in d.row_mut(j).iter_mut().zip(g.row(i)) {
                    *o += x;
                }
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::MeanRows(a) => {
            let va = val(*a);
            let inv = 1.0 / va.rows() as f64;
            let mut d = Mat::zeros(va.rows(), va.cols());
            for r in 0..va.rows() {
                for (o, x) in d.row_mut(r).iter_mut().zip(g.data()) {
                    *o = x * inv;
                }
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::GroupMean(a, groups) => {
            let va = val(*a);
            let mut d = Mat::zeros(va.rows(), va.cols());
            for (gi, grp) in groups.iter().enumerate() {
                let inv = 1.0 / grp.len() as f64;
                for &r in grp {
                    for (o, x) in d.row_mut(r).iter_mut().zip(g.row(gi)) {
                        *o += x * inv;
                    }
                }
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::SumAll(a) => {
            let va = val(*a);
            let gv = g.data()[0];
            accumulate(grads, nodes, *a, Mat::from_vec(va.rows(), va.cols(), vec![gv; va.len()]));
        }
        Op::L2NormalizeRows { x, norms } => {
            let y = &node.value;
            let mut d = Mat::zeros(g.rows(), g.cols());
            for r in 0..g.rows() {
                let n = norms[r];
                if n == 0.0 {
                    continue;
                }
                let gy = dot(g.row(r), y.row(r));
                for ((o, gv), yv) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                    *o = (gv - yv * gy) / n;
                }
            }
            accumulate(grads, nodes, *x, d);
        }
        Op::BceWithLogits {
            logits,
            targets,
            weights,
        } => {
            let z = val(*logits);
            let gv = g.data()[0];
            let d = z
                .data()
                .iter()
                .zip(targets.iter())
                .zip(weights.iter())
                .map(|((&z, &t), &w)| gv * w * (sigmoid(z) - t))
                .collect();
            accumulate(grads, nodes, *logits, Mat::from_vec(z.rows(), z.cols(), d));
        }
        Op::SoftmaxCe { logits, target, probs } => {
            let gv = g.data()[0];
            let mut d: Vec<f64> = probs.iter().map(|p| gv * p).collect();
            d[*target] -= gv;
            accumulate(grads, nodes, *logits, Mat::row_vector(d));
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter loaded on the tape, if it received one.
    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }

    /// Every parameter that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Mat)> + '_ {
        self.params.iter().filter_map(|(&id, &v)| self.wrt(v).map(|g| (id, g)))
    }
}
