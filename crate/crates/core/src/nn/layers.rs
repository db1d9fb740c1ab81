//! Parameterized building blocks: linear maps, affine layer norm, multi-head
//! attention and pre-norm transformer blocks.
//!
//! Each layer holds only [`ParamId`]s. Forward passes load the weights onto a
//! [`Tape`] through a `*Vars` bundle, which lets callers substitute other
//! nodes (for example interpolated weights) before applying the layer.

use super::init::{derive_seed, seeded_init, seeded_normal, InitScheme};
use super::mat::Mat;
use super::param::{ParamGroup, ParamId, ParamStore};
use super::tape::{AttnLayout, Tape, Var};
use super::NnError;

/// Options shared by the constructors below.
#[derive(Clone, Copy, Debug)]
pub struct InitOpts {
    pub seed: u64,
    pub trainable: bool,
    pub group: ParamGroup,
}

impl InitOpts {
    pub fn new(seed: u64, trainable: bool) -> Self {
        Self {
            seed,
            trainable,
            group: ParamGroup::New,
        }
    }
}

fn add(store: &mut ParamStore, name: String, m: Mat, opts: InitOpts) -> Result<ParamId, NnError> {
    store.add_in_group(name, m, opts.trainable, opts.group)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub n_heads: usize,
    pub model_dim: usize,
    pub causal: bool,
}

impl AttentionSpec {
    pub fn new(n_heads: usize, model_dim: usize, causal: bool) -> Result<Self, NnError> {
        if n_heads == 0 || model_dim == 0 || model_dim % n_heads != 0 {
            return Err(NnError::Shape(format!(
                "model_dim {model_dim} must be a positive multiple of n_heads {n_heads}"
            )));
        }
        Ok(Self {
            n_heads,
            model_dim,
            causal,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        scheme: InitScheme,
        opts: InitOpts,
    ) -> Result<Self, NnError> {
        let wname = format!("{name}.weight");
        let w = seeded_init(in_dim, out_dim, derive_seed(opts.seed, &wname), scheme);
        let weight = add(store, wname, w, opts)?;
        let bias = add(store, format!("{name}.bias"), Mat::zeros(1, out_dim), opts)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn vars(&self, tape: &Tape, store: &ParamStore) -> LinearVars {
        LinearVars {
            weight: tape.param(store, self.weight),
            bias: tape.param(store, self.bias),
        }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Var {
        Self::apply(tape, self.vars(tape, store), x)
    }

    pub fn apply(tape: &Tape, vars: LinearVars, x: Var) -> Var {
        let h = tape.matmul(x, vars.weight);
        tape.add_row(h, vars.bias)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormVars {
    pub gain: Var,
    pub bias: Var,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, opts: InitOpts) -> Result<Self, NnError> {
        let gain = add(store, format!("{name}.gain"), seeded_init(1, dim, 0, InitScheme::Ones), opts)?;
        let bias = add(store, format!("{name}.bias"), Mat::zeros(1, dim), opts)?;
        Ok(Self { gain, bias })
    }

    pub fn vars(&self, tape: &Tape, store: &ParamStore) -> LayerNormVars {
        LayerNormVars {
            gain: tape.param(store, self.gain),
            bias: tape.param(store, self.bias),
        }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Var {
        Self::apply(tape, self.vars(tape, store), x)
    }

    pub fn apply(tape: &Tape, vars: LayerNormVars, x: Var) -> Var {
        let n = tape.layer_norm(x);
        let s = tape.mul_row(n, vars.gain);
        tape.add_row(s, vars.bias)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }
}

// ---------------------------------------------------------------------------

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub spec: AttentionSpec,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: LinearVars,
    pub wk: LinearVars,
    pub wv: LinearVars,
    pub wo: LinearVars,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spec: AttentionSpec,
        zero_output: bool,
        opts: InitOpts,
    ) -> Result<Self, NnError> {
        let d = spec.model_dim;
        let ns = InitScheme::NormalScaled;
        let out_scheme = if zero_output { InitScheme::Zeros } else { ns };
        Ok(Self {
            spec,
            wq: Linear::new(store, &format!("{name}.wq"), d, d, ns, opts)?,
            wk: Linear::new(store, &format!("{name}.wk"), d, d, ns, opts)?,
            wv: Linear::new(store, &format!("{name}.wv"), d, d, ns, opts)?,
            wo: Linear::new(store, &format!("{name}.wo"), d, d, out_scheme, opts)?,
        })
    }

    pub fn vars(&self, tape: &Tape, store: &ParamStore) -> AttentionVars {
        AttentionVars {
            wq: self.wq.vars(tape, store),
            wk: self.wk.vars(tape, store),
            wv: self.wv.vars(tape, store),
            wo: self.wo.vars(tape, store),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.wq, &self.wk, &self.wv, &self.wo]
            .iter()
            .flat_map(|l| l.param_ids())
            .collect()
    }

    /// Attention of `xq` over `xkv` with already projected inputs skipped:
    /// `q`, `k`, `v` are the outputs of the respective projections.
    pub fn attend_projected(
        &self,
        tape: &Tape,
        vars: &AttentionVars,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
    ) -> Result<Var, NnError> {
        let hd = self.spec.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let heads = if self.spec.n_heads == 1 {
            vec![tape.attention(q, k, v, scale, layout)?]
        } else {
            (0..self.spec.n_heads)
                .map(|h| {
                    let qh = tape.slice_cols(q, h * hd, hd);
                    let kh = tape.slice_cols(k, h * hd, hd);
                    let vh = tape.slice_cols(v, h * hd, hd);
                    tape.attention(qh, kh, vh, scale, layout)
                })
                .collect::<Result<Vec<_>, _>>()?
        };
        let o = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        Ok(Linear::apply(tape, vars.wo, o))
    }

    pub fn apply(
        &self,
        tape: &Tape,
        vars: &AttentionVars,
        xq: Var,
        xkv: Var,
        layout: &AttnLayout,
    ) -> Result<Var, NnError> {
        let q = Linear::apply(tape, vars.wq, xq);
        let k = Linear::apply(tape, vars.wk, xkv);
        let v = Linear::apply(tape, vars.wv, xkv);
        self.attend_projected(tape, vars, q, k, v, layout)
    }

    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        xq: Var,
        xkv: Var,
        layout: &AttnLayout,
    ) -> Result<Var, NnError> {
        let vars = self.vars(tape, store);
        self.apply(tape, &vars, xq, xkv, layout)
    }
}

/// Plain scaled dot-product attention on raw arrays; `mask[i][j] == true`
/// lets query `i` see key `j`.
pub fn scaled_dot_attention(
    tape: &Tape,
    queries: Var,
    keys: Var,
    values: Var,
    mask: Option<Vec<bool>>,
) -> Result<Var, NnError> {
    let d = tape.shape(queries).1;
    tape.attention(queries, keys, values, 1.0 / (d as f64).sqrt(), &AttnLayout::Dense { mask })
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, zero_output: bool, opts: InitOpts) -> Result<Self, NnError> {
        let out_scheme = if zero_output { InitScheme::Zeros } else { InitScheme::NormalScaled };
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, InitScheme::NormalScaled, opts)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, out_scheme, opts)?,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(tape, store, x);
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.fc1.param_ids();
        v.extend(self.fc2.param_ids());
        v
    }
}

// ---------------------------------------------------------------------------

/// Pre-norm block: `h = x + Attn(LN₁(x))`, `y = h + MLP(LN₂(h))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub name: String,
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, spec: AttentionSpec, mlp_ratio: usize, opts: InitOpts) -> Result<Self, NnError> {
        Self::with_zero_residuals(store, name, spec, mlp_ratio, false, opts)
    }

    /// Like [`TransformerBlock::new`]; when `zero_residuals` is set the attention
    /// output projection and the second MLP layer start at zero.
    pub fn with_zero_residuals(
        store: &mut ParamStore,
        name: &str,
        spec: AttentionSpec,
        mlp_ratio: usize,
        zero_residuals: bool,
        opts: InitOpts,
    ) -> Result<Self, NnError> {
        let d = spec.model_dim;
        Ok(Self {
            name: name.to_string(),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, opts)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), spec, zero_residuals, opts)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, opts)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, d * mlp_ratio, zero_residuals, opts)?,
        })
    }

    pub fn layout(&self) -> AttnLayout {
        if self.attn.spec.causal {
            AttnLayout::Causal
        } else {
            AttnLayout::Dense { mask: None }
        }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        self.forward_with_layout(tape, store, x, &self.layout())
    }

    pub fn forward_with_layout(&self, tape: &Tape, store: &ParamStore, x: Var, layout: &AttnLayout) -> Result<Var, NnError> {
        if !tape.value(x).is_finite() {
            return Err(NnError::NonFinite(format!("{} input", self.name)));
        }
        let h = self.ln1.forward(tape, store, x);
        let a = self.attn.forward(tape, store, h, h, layout)?;
        let x = tape.add(x, a);
        let h = self.ln2.forward(tape, store, x);
        let m = self.mlp.forward(tape, store, h);
        let out = tape.add(x, m);
        if !tape.value(out).is_finite() {
            return Err(NnError::NonFinite(self.name.clone()));
        }
        Ok(out)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.ln1.param_ids();
        v.extend(self.attn.param_ids());
        v.extend(self.ln2.param_ids());
        v.extend(self.mlp.param_ids());
        v
    }
}

/// Embedding table with `N(0, std²)` rows.
pub fn embedding_table(store: &mut ParamStore, name: &str, rows: usize, dim: usize, std: f64, opts: InitOpts) -> Result<ParamId, NnError> {
    let m = seeded_normal(rows, dim, derive_seed(opts.seed, name), std);
    add(store, name.to_string(), m, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::Precision;

    fn block(zero: bool) -> (ParamStore, TransformerBlock) {
        let mut store = ParamStore::new();
        let spec = AttentionSpec::new(2, 8, false).unwrap();
        let b = TransformerBlock::with_zero_residuals(&mut store, "blk", spec, 2, zero, InitOpts::new(3, true)).unwrap();
        (store, b)
    }

    fn input(rows: usize, cols: usize) -> Mat {
        seeded_normal(rows, cols, 11, 1.0)
    }

    #[test]
    fn spec_requires_divisible_width() {
        assert!(AttentionSpec::new(3, 8, false).is_err());
        assert_eq!(AttentionSpec::new(2, 8, false).unwrap().head_dim(), 4);
    }

    #[test]
    fn zero_residual_block_is_identity() {
        let (store, b) = block(true);
        let t = Tape::new(Precision::F64);
        let x = input(5, 8);
        let xv = t.constant(x.clone());
        let y = b.forward(&t, &store, xv).unwrap();
        assert!(t.value(y).bit_eq(&x));
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let (store, b) = block(false);
        let x = input(4, 8);
        let perm = [2usize, 0, 3, 1];
        let px = Mat::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>());
        let t = Tape::new(Precision::F64);
        let y = t.value(b.forward(&t, &store, t.constant(x)).unwrap());
        let py = t.value(b.forward(&t, &store, t.constant(px)).unwrap());
        for (k, &i) in perm.iter().enumerate() {
            for (a, c) in py.row(k).iter().zip(y.row(i)) {
                assert!((a - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_input_names_the_block() {
        let (store, b) = block(false);
        let t = Tape::new(Precision::F64);
        let mut x = input(2, 8);
        x.data_mut()[3] = f64::NAN;
        match b.forward(&t, &store, t.constant(x)) {
            Err(NnError::NonFinite(name)) => assert!(name.contains("blk")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn equal_logits_average_values() {
        let t = Tape::new(Precision::F64);
        let q = t.constant(Mat::from_rows(&[vec![1.0, 0.0]]));
        let k = t.constant(Mat::from_rows(&[vec![0.0, 1.0], vec![0.0, -1.0]]));
        let v = t.constant(Mat::from_rows(&[vec![2.0, 4.0], vec![6.0, -8.0]]));
        let o = scaled_dot_attention(&t, q, k, v, None).unwrap();
        assert_eq!(t.value(o).data(), &[4.0, -2.0]);
        let masked = scaled_dot_attention(&t, q, k, v, Some(vec![true, false])).unwrap();
        let single = scaled_dot_attention(&t, q, t.slice_rows(k, 0, 1), t.slice_rows(v, 0, 1), None).unwrap();
        assert!(t.value(masked).bit_eq(&t.value(single)));
    }
}
