//! Reverse-mode computation record.
//!
//! Nodes are appended in creation order, so every input id is smaller than
//! the id of its consumer and the record is acyclic by construction. Backward
//! walks the nodes from the loss towards the leaves once.

use std::collections::BTreeMap;
use std::ops::Range;

use super::kernels;
use super::rng::{Mode, SeedStream};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Norm below which cosine similarity is refused.
pub const MIN_COSINE_NORM: f64 = 1e-8;

#[derive(Clone, Debug)]
enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Sum(Var),
    Softmax(Var),
    LogSumExp(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Cosine(Var, Var),
    Dot(Var, Var),
    Dropout(Var, Vec<T>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    GatherRows(Var, Vec<usize>),
    WeightedRows(Var, Vec<T>),
    Stack(Vec<Var>),
    Index(Var, usize),
}

#[derive(Clone, Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The active computation record for one forward/backward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every `requires_grad` leaf.
#[derive(Clone, Debug)]
pub struct Gradients<T: Real> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a leaf. Leaves the loss does not depend on hold zeros.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn wrt(&self, v: Var) -> Result<&Tensor<T>> {
        self.grads
            .get(&v)
            .ok_or_else(|| Error::Contract(format!("no gradient recorded for node {}", v.0)))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )))
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input ids of a node, for inspecting the record's topology.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.inputs_of(&self.nodes[v.0].op)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::Cosine(a, b)
            | Op::Dot(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Gelu(a)
            | Op::Sum(a)
            | Op::Softmax(a)
            | Op::LogSumExp(a)
            | Op::Dropout(a, _)
            | Op::GatherRows(a, _)
            | Op::WeightedRows(a, _)
            | Op::Index(a, _) => vec![*a],
            Op::Slice { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat(parts, _) | Op::Stack(parts) => parts.clone(),
        }
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Result<Var> {
        let v = self.constant(t)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// Leaf without a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, "leaf")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: [{m}x{k}] x [{k2}x{n}] inner dimensions disagree"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::mm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ` for a `[m×k]` and b `[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_nt: [{m}x{k}] x [{n}x{k2}]^T inner dimensions disagree"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::mm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMulNT(a, b), "matmul_nt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::matrix(n, m, out)?, Op::Transpose(a), "transpose")
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(t, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-n bias to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(bias).len() != n {
            return Err(Error::Dimension(format!(
                "add_row: bias of length {} for {n} columns",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, &bv) in out[r * n..(r + 1) * n].iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        self.push(Tensor::matrix(m, n, out)?, Op::AddRow(x, bias), "add_row")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let t = self.map(x, |v| v * s)?;
        self.push(t, Op::Scale(x, s), "scale")
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
        let src = self.value(x);
        Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, T::exp)?;
        self.push(t, Op::Exp(x), "exp")
    }

    /// Natural log; non-positive inputs surface as a non-finite error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| if v > T::zero() { v.ln() } else { T::nan() })?;
        self.push(t, Op::Log(x), "log")
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| kernels::gelu(v).0)?;
        self.push(t, Op::Gelu(x), "gelu")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// Mean of all elements.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Softmax along the last axis (rows of a matrix, or a whole vector).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Softmax along the last axis where columns with `mask[c] == false`
    /// receive exactly zero probability.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let src = self.value(x);
        let n = src.last_dim();
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::Dimension(format!(
                    "softmax mask of length {} for width {n}",
                    m.len()
                )));
            }
            if !m.iter().any(|&k| k) {
                return Err(Error::Contract("softmax over a fully masked row".into()));
            }
        }
        let rows = src.len() / n;
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            kernels::softmax_row(&src.data()[r * n..(r + 1) * n], mask, &mut out[r * n..(r + 1) * n]);
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        self.push(t, Op::Softmax(x), "softmax")
    }

    /// `log Σ exp(x)` over all elements, computed with max subtraction.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).data();
        let m = d.iter().copied().fold(T::neg_infinity(), T::max);
        let s: T = d.iter().map(|&v| (v - m).exp()).sum();
        self.push(Tensor::scalar(m + s.ln()), Op::LogSumExp(x), "logsumexp")
    }

    /// Row-wise layer normalization followed by the affine map `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        let src = self.value(x);
        let d = src.last_dim();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::Dimension(format!(
                "layer_norm: gamma/beta must have length {d}"
            )));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / d;
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let xh = (row[c] - mean) * rs;
                xhat[r * d + c] = xh;
                out[r * d + c] = g[c] * xh + b[c];
            }
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Cosine similarity of two equally shaped tensors, viewed as flat vectors.
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        same_shape("cosine", self.value(u), self.value(v))?;
        let (a, b) = (self.value(u).data(), self.value(v).data());
        let (nu, nv) = (kernels::norm(a), kernels::norm(b));
        for n in [nu, nv] {
            if n.as_f64() < MIN_COSINE_NORM {
                return Err(Error::DegenerateVector {
                    norm: n.as_f64(),
                    min: MIN_COSINE_NORM,
                });
            }
        }
        let c = kernels::dot(a, b) / (nu * nv);
        self.push(Tensor::scalar(c), Op::Cosine(u, v), "cosine")
    }

    pub fn dot(&mut self, u: Var, v: Var) -> Result<Var> {
        same_shape("dot", self.value(u), self.value(v))?;
        let d = kernels::dot(self.value(u).data(), self.value(v).data());
        self.push(Tensor::scalar(d), Op::Dot(u, v), "dot")
    }

    /// Inverted dropout. Identity in eval mode or at rate 0; otherwise each
    /// element is dropped with probability `rate` using the next words of
    /// `stream`, and survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, stream: &mut SeedStream) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = stream.keep_mask(self.value(x).len(), rate);
        self.dropout_with_mask(x, &keep, rate)
    }

    /// Dropout with an explicit keep mask.
    pub fn dropout_with_mask(&mut self, x: Var, keep: &[bool], rate: f64) -> Result<Var> {
        if keep.len() != self.value(x).len() {
            return Err(Error::Dimension(format!(
                "dropout mask of length {} for {} elements",
                keep.len(),
                self.value(x).len()
            )));
        }
        let s = T::of(1.0 / (1.0 - rate));
        let factors: Vec<T> = keep.iter().map(|&k| if k { s } else { T::zero() }).collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&factors).map(|(&v, &f)| v * f).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        self.push(t, Op::Dropout(x, factors), "dropout")
    }

    /// Concatenation along `axis`. Rank-1 inputs concatenate end to end
    /// (axis 0); rank-2 inputs stack rows (axis 0) or columns (axis 1).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let rank = self.value(parts[0]).rank();
        if parts.iter().any(|&p| self.value(p).rank() != rank) || axis >= rank {
            return Err(Error::Dimension(format!("concat: mixed ranks or axis {axis} out of range")));
        }
        let t = if rank == 1 || axis == 0 {
            let width = self.value(parts[0]).last_dim();
            if rank == 2 && parts.iter().any(|&p| self.value(p).last_dim() != width) {
                return Err(Error::Dimension("concat rows: column counts differ".into()));
            }
            let data: Vec<T> = parts.iter().flat_map(|&p| self.value(p).data().iter().copied()).collect();
            if rank == 1 {
                Tensor::vector(data)
            } else {
                Tensor::matrix(data.len() / width, width, data)?
            }
        } else {
            let rows = self.value(parts[0]).dims2()?.0;
            let mut widths = Vec::with_capacity(parts.len());
            for &p in parts {
                let (r, c) = self.value(p).dims2()?;
                if r != rows {
                    return Err(Error::Dimension("concat columns: row counts differ".into()));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(r));
                }
            }
            Tensor::matrix(rows, total, data)?
        };
        self.push(t, Op::Concat(parts.to_vec(), axis), "concat")
    }

    /// Rectangular sub-block of a matrix.
    pub fn slice(&mut self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if rows.start >= rows.end || cols.start >= cols.end || rows.end > m || cols.end > n {
            return Err(Error::Dimension(format!(
                "slice {rows:?} x {cols:?} out of [{m}x{n}]"
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for r in rows.clone() {
            data.extend_from_slice(&src[r * n + cols.start..r * n + cols.end]);
        }
        let t = Tensor::matrix(rows.len(), cols.len(), data)?;
        self.push(t, Op::Slice { x, rows, cols }, "slice")
    }

    /// Gathers rows of a matrix (embedding lookup). Output is `[len×n]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.value(table).dims2()?;
        if indices.is_empty() {
            return Err(Error::Contract("gather of zero rows".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::Dimension(format!("row {bad} out of {m}")));
        }
        let src = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(src.row(i));
        }
        let t = Tensor::matrix(indices.len(), n, data)?;
        self.push(t, Op::GatherRows(table, indices.to_vec()), "gather_rows")
    }

    /// Single row of a matrix as a rank-1 vector.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let w = self.weights_for_row(x, index)?;
        self.weighted_rows(x, &w)
    }

    fn weights_for_row(&self, x: Var, index: usize) -> Result<Vec<T>> {
        let (m, _) = self.value(x).dims2()?;
        if index >= m {
            return Err(Error::Dimension(format!("row {index} out of {m}")));
        }
        let mut w = vec![T::zero(); m];
        w[index] = T::one();
        Ok(w)
    }

    /// `Σ_r weights[r] · x[r, :]` as a rank-1 vector.
    pub fn weighted_rows(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if weights.len() != m {
            return Err(Error::Dimension(format!(
                "weighted_rows: {} weights for {m} rows",
                weights.len()
            )));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n];
        for (r, &w) in weights.iter().enumerate() {
            if w != T::zero() {
                kernels::axpy(w, &src[r * n..(r + 1) * n], &mut out);
            }
        }
        self.push(Tensor::vector(out), Op::WeightedRows(x, weights.to_vec()), "weighted_rows")
    }

    /// Mean over the rows of a matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, _) = self.value(x).dims2()?;
        let w = vec![T::one() / T::of(m as f64); m];
        self.weighted_rows(x, &w)
    }

    /// Collects scalar nodes into one rank-1 vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        if scalars.is_empty() {
            return Err(Error::Contract("stack of zero scalars".into()));
        }
        let mut data = Vec::with_capacity(scalars.len());
        for &s in scalars {
            data.push(self.value(s).item()?);
        }
        self.push(Tensor::vector(data), Op::Stack(scalars.to_vec()), "stack")
    }

    /// Element `i` of a flat tensor as a scalar.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let n = self.value(x).len();
        if i >= n {
            return Err(Error::Dimension(format!("index {i} out of {n}")));
        }
        let v = self.value(x).get(i);
        self.push(Tensor::scalar(v), Op::Index(x, i), "index")
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let data = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                out.insert(Var(i), Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        // Accumulate into an input's buffer, allocating on first touch.
        macro_rules! acc {
            ($v:expr, $f:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let len = self.nodes[v.0].value.len();
                    let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(buf);
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = out.last_dim();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc!(*a, |buf: &mut Vec<T>| kernels::mm_nt(g, bv, buf, m, n, k));
                acc!(*b, |buf: &mut Vec<T>| kernels::mm_tn(av, g, buf, m, k, n));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = out.last_dim();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc!(*a, |buf: &mut Vec<T>| kernels::mm_nn(g, bv, buf, m, n, k));
                acc!(*b, |buf: &mut Vec<T>| kernels::mm_tn(g, av, buf, m, n, k));
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2()?;
                acc!(*a, |buf: &mut Vec<T>| {
                    for r in 0..m {
                        for c in 0..n {
                            buf[r * n + c] = buf[r * n + c] + g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc!(*a, |buf: &mut Vec<T>| kernels::axpy(T::one(), g, buf));
                acc!(*b, |buf: &mut Vec<T>| kernels::axpy(T::one(), g, buf));
            }
            Op::Sub(a, b) => {
                acc!(*a, |buf: &mut Vec<T>| kernels::axpy(T::one(), g, buf));
                acc!(*b, |buf: &mut Vec<T>| kernels::axpy(-T::one(), g, buf));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc!(*a, |buf: &mut Vec<T>| {
                    for ((o, &gi), &y) in buf.iter_mut().zip(g).zip(bv) {
                        *o = *o + gi * y;
                    }
                });
                acc!(*b, |buf: &mut Vec<T>| {
                    for ((o, &gi), &x) in buf.iter_mut().zip(g).zip(av) {
                        *o = *o + gi * x;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                let n = out.last_dim();
                acc!(*x, |buf: &mut Vec<T>| kernels::axpy(T::one(), g, buf));
                acc!(*bias, |buf: &mut Vec<T>| {
                    for row in g.chunks(n) {
                        kernels::axpy(T::one(), row, buf);
                    }
                });
            }
            Op::Scale(x, s) => {
                acc!(*x, |buf: &mut Vec<T>| kernels::axpy(*s, g, buf));
            }
            Op::Exp(x) => {
                let y = out.data();
                acc!(*x, |buf: &mut Vec<T>| {
                    for ((o, &gi), &yi) in buf.iter_mut().zip(g).zip(y) {
                        *o = *o + gi * yi;
                    }
                });
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                acc!(*x, |buf: &mut Vec<T>| {
                    for ((o, &gi), &xi) in buf.iter_mut().zip(g).zip(xv) {
                        *o = *o + gi / xi;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc!(*x, |buf: &mut Vec<T>| {
                    for ((o, &gi), &xi) in buf.iter_mut().zip(g).zip(xv) {
                        *o = *o + gi * kernels::gelu(xi).1;
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc!(*x, |buf: &mut Vec<T>| {
                    for o in buf.iter_mut() {
                        *o = *o + g0;
                    }
                });
            }
            Op::Softmax(x) => {
                let n = out.last_dim();
                let y = out.data();
                acc!(*x, |buf: &mut Vec<T>| {
                    for ((yr, gr), br) in y.chunks(n).zip(g.chunks(n)).zip(buf.chunks_mut(n)) {
                        let inner: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..n {
                            br[c] = br[c] + yr[c] * (gr[c] - inner);
                        }
                    }
                });
            }
            Op::LogSumExp(x) => {
                let xv = self.value(*x).data();
                let lse = out.data()[0];
                let g0 = g[0];
                acc!(*x, |buf: &mut Vec<T>| {
                    for (o, &xi) in buf.iter_mut().zip(xv) {
                        *o = *o + g0 * (xi - lse).exp();
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = out.last_dim();
                let gm = self.value(*gamma).data();
                let dn = T::of(d as f64);
                acc!(*x, |buf: &mut Vec<T>| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for c in 0..d {
                            let dxh = gr[c] * gm[c];
                            mean_dxh = mean_dxh + dxh;
                            mean_dxh_xh = mean_dxh_xh + dxh * xh[c];
                        }
                        mean_dxh = mean_dxh / dn;
                        mean_dxh_xh = mean_dxh_xh / dn;
                        for c in 0..d {
                            let dxh = gr[c] * gm[c];
                            buf[r * d + c] = buf[r * d + c] + rs * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
                        }
                    }
                });
                acc!(*gamma, |buf: &mut Vec<T>| {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            buf[c] = buf[c] + gr[c] * xr[c];
                        }
                    }
                });
                acc!(*beta, |buf: &mut Vec<T>| {
                    for gr in g.chunks(d) {
                        kernels::axpy(T::one(), gr, buf);
                    }
                });
            }
            Op::Cosine(u, v) => {
                let (a, b) = (self.value(*u).data(), self.value(*v).data());
                let (na, nb) = (kernels::norm(a), kernels::norm(b));
                let c = out.data()[0];
                let g0 = g[0];
                acc!(*u, |buf: &mut Vec<T>| {
                    let inv = T::one() / (na * nb);
                    let k = c / (na * na);
                    for ((o, &ai), &bi) in buf.iter_mut().zip(a).zip(b) {
                        *o = *o + g0 * (bi * inv - ai * k);
                    }
                });
                acc!(*v, |buf: &mut Vec<T>| {
                    let inv = T::one() / (na * nb);
                    let k = c / (nb * nb);
                    for ((o, &ai), &bi) in buf.iter_mut().zip(a).zip(b) {
                        *o = *o + g0 * (ai * inv - bi * k);
                    }
                });
            }
            Op::Dot(u, v) => {
                let (a, b) = (self.value(*u).data(), self.value(*v).data());
                let g0 = g[0];
                acc!(*u, |buf: &mut Vec<T>| kernels::axpy(g0, b, buf));
                acc!(*v, |buf: &mut Vec<T>| kernels::axpy(g0, a, buf));
            }
            Op::Dropout(x, factors) => {
                acc!(*x, |buf: &mut Vec<T>| {
                    for ((o, &gi), &f) in buf.iter_mut().zip(g).zip(factors) {
                        *o = *o + gi * f;
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let rank = out.rank();
                if rank == 1 || *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        let slice = &g[offset..offset + len];
                        acc!(p, |buf: &mut Vec<T>| kernels::axpy(T::one(), slice, buf));
                        offset += len;
                    }
                } else {
                    let total = out.last_dim();
                    let mut col = 0;
                    for &p in parts {
                        let (rows, w) = self.value(p).dims2()?;
                        acc!(p, |buf: &mut Vec<T>| {
                            for r in 0..rows {
                                kernels::axpy(
                                    T::one(),
                                    &g[r * total + col..r * total + col + w],
                                    &mut buf[r * w..(r + 1) * w],
                                );
                            }
                        });
                        col += w;
                    }
                }
            }
            Op::Slice { x, rows, cols } => {
                let n = self.value(*x).last_dim();
                let w = cols.len();
                acc!(*x, |buf: &mut Vec<T>| {
                    for (k, r) in rows.clone().enumerate() {
                        kernels::axpy(
                            T::one(),
                            &g[k * w..(k + 1) * w],
                            &mut buf[r * n + cols.start..r * n + cols.end],
                        );
                    }
                });
            }
            Op::GatherRows(table, indices) => {
                let n = out.last_dim();
                acc!(*table, |buf: &mut Vec<T>| {
                    for (k, &r) in indices.iter().enumerate() {
                        kernels::axpy(T::one(), &g[k * n..(k + 1) * n], &mut buf[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::WeightedRows(x, weights) => {
                let n = out.len();
                acc!(*x, |buf: &mut Vec<T>| {
                    for (r, &w) in weights.iter().enumerate() {
                        if w != T::zero() {
                            kernels::axpy(w, g, &mut buf[r * n..(r + 1) * n]);
                        }
                    }
                });
            }
            Op::Stack(parts) => {
                for (k, &p) in parts.iter().enumerate() {
                    let gk = g[k];
                    acc!(p, |buf: &mut Vec<T>| buf[0] = buf[0] + gk);
                }
            }
            Op::Index(x, idx) => {
                let g0 = g[0];
                let idx = *idx;
                acc!(*x, |buf: &mut Vec<T>| buf[idx] = buf[idx] + g0);
            }
        }
        Ok(())
    }
}
