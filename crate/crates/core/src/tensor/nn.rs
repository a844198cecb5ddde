//! Parameter storage and the attention building blocks.

use rand::Rng;

use super::matrix::Matrix;
use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};

/// Standard deviation of the seeded Gaussian weight init.
pub const DEFAULT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }
}

/// Tape handles for a [`ParamStore`], produced by [`ParamStore::bind`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Parameter gradients in store order (zeros for unreached parameters).
    pub fn gradients(&self, store: &ParamStore, grads: &Gradients) -> Vec<Matrix> {
        self.vars
            .iter()
            .zip(&store.values)
            .map(|(&v, m)| grads.get_or_zeros(v, m))
            .collect()
    }
}

/// Head count and width for multi-head attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    heads: usize,
    model_dim: usize,
}

impl AttentionConfig {
    pub const DEFAULT_HEADS: usize = 8;

    pub fn new(heads: usize, model_dim: usize) -> Result<Self> {
        if heads == 0 {
            return Err(Error::invalid("heads", "need at least one head"));
        }
        if model_dim % heads != 0 {
            return Err(Error::invalid(
                "model_dim",
                format!("{model_dim} is not divisible by {heads} heads"),
            ));
        }
        Ok(Self { heads, model_dim })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn model_dim(&self) -> usize {
        self.model_dim
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn score_scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Matrix::random_normal(inputs, outputs, std, rng),
        );
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, outputs));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, params.var(self.weight))?;
        tape.add_row(xw, params.var(self.bias))
    }
}

/// Layer normalization with a learnable affine, initialized to identity.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Matrix::filled(1, dim, 1.0));
        let shift = store.add(format!("{name}.shift"), Matrix::zeros(1, dim));
        Self { gain, shift }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x)?;
        let scaled = tape.mul_row(n, params.var(self.gain))?;
        tape.add_row(scaled, params.var(self.shift))
    }
}

/// Two linear layers with a GELU between them.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub expand: Linear,
    pub contract: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::invalid("hidden", "must be at least 1"));
        }
        Ok(Self {
            expand: Linear::new(store, &format!("{name}.expand"), dim, hidden, std, rng),
            contract: Linear::new(store, &format!("{name}.contract"), hidden, dim, std, rng),
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let h = self.expand.forward(tape, params, x)?;
        let h = tape.gelu(h);
        self.contract.forward(tape, params, h)
    }
}

/// Scaled dot-product attention over `heads` column blocks with learned
/// query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: AttentionConfig,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let d = cfg.model_dim();
        Self {
            cfg,
            query: Linear::new(store, &format!("{name}.query"), d, d, std, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, std, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, std, rng),
            output: Linear::new(store, &format!("{name}.output"), d, d, std, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, q: Var, k: Var, v: Var) -> Result<Var> {
        let d = self.cfg.model_dim();
        let (qs, ks, vs) = (tape.value(q).shape(), tape.value(k).shape(), tape.value(v).shape());
        if qs.1 != d || ks.1 != d || vs.1 != d {
            return Err(Error::Shape {
                op: "multi_head_attention",
                lhs: qs,
                rhs: if ks.1 != d { ks } else { vs },
            });
        }
        if ks.0 != vs.0 {
            return Err(Error::Shape {
                op: "multi_head_attention",
                lhs: ks,
                rhs: vs,
            });
        }

        let qp = self.query.forward(tape, params, q)?;
        let kp = self.key.forward(tape, params, k)?;
        let vp = self.value.forward(tape, params, v)?;

        let hd = self.cfg.head_dim();
        let mut heads = Vec::with_capacity(self.cfg.heads());
        for h in 0..self.cfg.heads() {
            let qh = tape.slice_cols(qp, h * hd, hd)?;
            let kh = tape.slice_cols(kp, h * hd, hd)?;
            let vh = tape.slice_cols(vp, h * hd, hd)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, self.cfg.score_scale());
            let weights = tape.softmax_rows(scores);
            heads.push(tape.matmul(weights, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        self.output.forward(tape, params, merged)
    }
}

/// Replaces the value of each listed parameter with zeros.
pub fn zero_params(store: &mut ParamStore, ids: &[ParamId]) {
    for &id in ids {
        let m = store.get_mut(id);
        *m = Matrix::zeros(m.rows(), m.cols());
    }
}
