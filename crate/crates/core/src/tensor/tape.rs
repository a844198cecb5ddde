//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s in execution
//! order, so the node list is already topologically sorted. [`Tape::backward`]
//! walks it once in reverse and sums contributions into one accumulator per
//! node, which handles shared subexpressions.

use std::sync::Arc;

use super::matrix::{gelu, gelu_derivative, Matrix};
use crate::error::{Error, Result};

/// Handle to a matrix recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse linear map between row spaces: output row `i` is
/// `sum_j w_ij * input_row_j` over the listed `(j, w_ij)` terms.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMix {
    input_rows: usize,
    terms: Vec<Vec<(usize, f64)>>,
}

impl RowMix {
    pub fn new(input_rows: usize, terms: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if let Some(&(j, _)) = terms.iter().flatten().find(|(j, _)| *j >= input_rows) {
            return Err(Error::invalid(
                "terms",
                format!("row {j} out of range for {input_rows} input rows"),
            ));
        }
        Ok(Self { input_rows, terms })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            input_rows: n,
            terms: (0..n).map(|i| vec![(i, 1.0)]).collect(),
        }
    }

    pub fn input_rows(&self) -> usize {
        self.input_rows
    }

    pub fn output_rows(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self, row: usize) -> &[(usize, f64)] {
        &self.terms[row]
    }

    pub fn apply(&self, m: &Matrix) -> Result<Matrix> {
        if m.rows() != self.input_rows {
            return Err(Error::Shape {
                op: "row_mix",
                lhs: (self.terms.len(), self.input_rows),
                rhs: m.shape(),
            });
        }
        let mut out = Matrix::zeros(self.terms.len(), m.cols());
        for (i, terms) in self.terms.iter().enumerate() {
            let dst = out.row_mut(i);
            for &(j, w) in terms {
                for (d, s) in dst.iter_mut().zip(m.row(j)) {
                    *d += w * s;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm { input: Var, inv_std: Vec<f64> },
    Gelu(Var),
    Transpose(Var),
    SliceCols { input: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { input: Var, indices: Vec<usize> },
    RowMix { input: Var, mix: Arc<RowMix> },
    Dot { input: Var, weights: Matrix },
    Objective { input: Var, grad: Matrix },
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient accumulators, one per recorded node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    fn check_row(&self, a: Var, row: Var, op: &'static str) -> Result<()> {
        let (m, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != m.cols() {
            return Err(Error::Shape {
                op,
                lhs: m.shape(),
                rhs: r.shape(),
            });
        }
        Ok(())
    }

    /// `a + row` with `row` (1 x cols) broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row, "add_row")?;
        let r = self.value(row).as_slice().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    /// Elementwise `a * row` with `row` (1 x cols) broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row, "mul_row")?;
        let r = self.value(row).as_slice().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (v, g) in value.row_mut(i).iter_mut().zip(&r) {
                *v *= g;
            }
        }
        Ok(self.push(value, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        self.push(value, Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let (value, inv_std) = self.value(a).layer_norm_with_stats()?;
        Ok(self.push(value, Op::LayerNorm { input: a, inv_std }))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, len)?;
        Ok(self.push(value, Op::SliceCols { input: a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_cols(&mats)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(a).gather_rows(indices)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                input: a,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn row_mix(&mut self, a: Var, mix: Arc<RowMix>) -> Result<Var> {
        let value = mix.apply(self.value(a))?;
        Ok(self.push(value, Op::RowMix { input: a, mix }))
    }

    /// Scalar `sum(a * weights)`; the usual probe for gradient checks.
    pub fn dot(&mut self, a: Var, weights: Matrix) -> Result<Var> {
        let m = self.value(a);
        if m.shape() != weights.shape() {
            return Err(Error::Shape {
                op: "dot",
                lhs: m.shape(),
                rhs: weights.shape(),
            });
        }
        let s = m
            .as_slice()
            .iter()
            .zip(weights.as_slice())
            .map(|(x, w)| x * w)
            .sum();
        Ok(self.push(Matrix::scalar(s), Op::Dot { input: a, weights }))
    }

    /// Records a scalar objective whose value and input-gradient were computed
    /// in closed form by the caller.
    pub fn objective(&mut self, a: Var, value: f64, grad: Matrix) -> Result<Var> {
        let m = self.value(a);
        if m.shape() != grad.shape() {
            return Err(Error::Shape {
                op: "objective",
                lhs: m.shape(),
                rhs: grad.shape(),
            });
        }
        Ok(self.push(Matrix::scalar(value), Op::Objective { input: a, grad }))
    }

    /// Back-propagates from a 1x1 output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(Error::invalid(
                "output",
                format!("backward needs a 1x1 output, got {:?}", out.shape()),
            ));
        }
        self.backward_with_seed(output, Matrix::scalar(1.0))
    }

    pub fn backward_with_seed(&self, output: Var, seed: Matrix) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.value(output).shape(),
                rhs: seed.shape(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.value(*b).transpose())?;
                    let db = self.value(*a).transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    let mut dr = Matrix::zeros(1, g.cols());
                    for r in g.iter_rows() {
                        for (d, v) in dr.as_mut_slice().iter_mut().zip(r) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *row, dr);
                }
                Op::MulRow(a, row) => {
                    let x = self.value(*a);
                    let w = self.value(*row).as_slice();
                    let mut da = g.clone();
                    let mut dr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        let (gr, xr) = (g.row(i), x.row(i));
                        for c in 0..g.cols() {
                            dr.as_mut_slice()[c] += gr[c] * xr[c];
                        }
                        for (d, wc) in da.row_mut(i).iter_mut().zip(w) {
                            *d *= wc;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *row, dr);
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g.scale(*f)),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (c, d) in da.row_mut(i).iter_mut().enumerate() {
                            *d = yr[c] * (gr[c] - inner);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm { input, inv_std } => {
                    let y = &node.value;
                    let n = y.cols() as f64;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = yr.iter().zip(gr).map(|(p, q)| p * q).sum::<f64>() / n;
                        for (c, d) in da.row_mut(i).iter_mut().enumerate() {
                            *d = inv_std[i] * (gr[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *input, da);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut da = g.clone();
                    for (d, &xv) in da.as_mut_slice().iter_mut().zip(x.as_slice()) {
                        *d *= gelu_derivative(xv);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::SliceCols { input, start } => {
                    let x = self.value(*input);
                    let mut da = Matrix::zeros(x.rows(), x.cols());
                    for i in 0..g.rows() {
                        da.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *input, da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let width = self.value(p).cols();
                        accumulate(&mut grads, p, g.slice_cols(offset, width)?);
                        offset += width;
                    }
                }
                Op::GatherRows { input, indices } => {
                    let x = self.value(*input);
                    let mut da = Matrix::zeros(x.rows(), x.cols());
                    for (k, &i) in indices.iter().enumerate() {
                        for (d, v) in da.row_mut(i).iter_mut().zip(g.row(k)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *input, da);
                }
                Op::RowMix { input, mix } => {
                    let x = self.value(*input);
                    let mut da = Matrix::zeros(x.rows(), x.cols());
                    for i in 0..mix.output_rows() {
                        for &(j, w) in mix.terms(i) {
                            for (d, v) in da.row_mut(j).iter_mut().zip(g.row(i)) {
                                *d += w * v;
                            }
                        }
                    }
                    accumulate(&mut grads, *input, da);
                }
                Op::Dot { input, weights } => {
                    accumulate(&mut grads, *input, weights.scale(g.get(0, 0)));
                }
                Op::Objective { input, grad } => {
                    accumulate(&mut grads, *input, grad.scale(g.get(0, 0)));
                }
            }
            // Leaves keep their gradient; interior accumulators are not needed again.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
