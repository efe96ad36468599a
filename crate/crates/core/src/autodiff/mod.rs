//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every primitive application in creation order. Nodes
//! whose inputs do not require gradients are stored as constants, so the
//! backward pass only walks the differentiable part of the tape.
//!
//! Broadcasting is limited to leading-batch expansion: for `add`, `sub` and
//! `mul` the right operand's shape must equal a suffix of the left operand's
//! shape and is repeated over the remaining leading dimensions.

mod check;
pub(crate) mod kernels;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

pub use check::{finite_difference_check, finite_difference_check_coords};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-6;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// The fixed primitive set.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    /// `[..., M, K] x [K, N]` (shared right operand) or batched with equal
    /// leading dimensions.
    MatMul,
    /// Swap two axes.
    Transpose(usize, usize),
    Reshape(Vec<usize>),
    /// Row gather along the token axis. With `shared_table` the input is
    /// `[N, F..]` and every sample reads from it; otherwise the input is
    /// `[B, N, F..]` and sample `b` reads its own rows. Output `[B, k, F..]`.
    Gather {
        indices: Vec<Vec<usize>>,
        shared_table: bool,
    },
    /// Inverse placement of [`Primitive::Gather`]: `[B, k, F..]` into
    /// `[B, len, F..]`, zero elsewhere, duplicates accumulate.
    Scatter { indices: Vec<Vec<usize>>, len: usize },
    Softmax,
    LogSoftmax,
    /// Inputs `(x, scale, shift)`, normalized over the last axis.
    LayerNorm,
    Gelu,
    Mean { axis: Option<usize> },
    SumOfSquares,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::ScalarMul(_) => "scalar-mul",
            Primitive::MatMul => "matmul",
            Primitive::Transpose(..) => "transpose",
            Primitive::Reshape(_) => "reshape",
            Primitive::Gather { .. } => "index-gather",
            Primitive::Scatter { .. } => "index-scatter",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log-softmax",
            Primitive::LayerNorm => "layer-norm",
            Primitive::Gelu => "gelu",
            Primitive::Mean { .. } => "mean",
            Primitive::SumOfSquares => "sum-of-squares",
        }
    }

    /// Parses a parameter-free primitive by name.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "matmul" => Primitive::MatMul,
            "softmax" => Primitive::Softmax,
            "log-softmax" => Primitive::LogSoftmax,
            "layer-norm" => Primitive::LayerNorm,
            "gelu" => Primitive::Gelu,
            "mean" => Primitive::Mean { axis: None },
            "sum-of-squares" => Primitive::SumOfSquares,
            other => return Err(Error::UnknownPrimitive(other.to_string())),
        })
    }

    fn arity(&self) -> usize {
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::MatMul => 2,
            Primitive::LayerNorm => 3,
            _ => 1,
        }
    }
}

#[derive(Debug)]
enum Saved {
    None,
    LayerNorm { xhat: Vec<f64>, rstd: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    /// `None` for leaves and for nodes recorded without differentiable inputs.
    op: Option<Primitive>,
    inputs: Vec<usize>,
    requires_grad: bool,
    is_param: bool,
    saved: Saved,
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Ordered record of primitive applications.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Adds a leaf. Leaves built from tensors with `requires_grad` are
    /// parameters and receive gradients.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let is_param = value.requires_grad();
        self.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            requires_grad: is_param,
            is_param,
            saved: Saved::None,
        })
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            requires_grad: false,
            is_param: false,
            saved: Saved::None,
        })
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_grad())
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.graph != self.id || var.index >= self.nodes.len() {
            return Err(Error::DetachedGraph);
        }
        Ok(var.index)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        assert_eq!(var.graph, self.id, "variable from another graph");
        &self.nodes[var.index].value
    }

    pub fn try_value(&self, var: Var) -> Result<&Tensor> {
        let i = self.check(var)?;
        Ok(&self.nodes[i].value)
    }

    /// Applies `op` to `inputs`, recording it for the backward pass when any
    /// input requires a gradient.
    pub fn apply(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != op.arity() {
            return Err(Error::Arity {
                op: op.name(),
                expected: op.arity(),
                got: inputs.len(),
            });
        }
        let idx = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        let vals: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let (value, saved) = forward(&op, &vals)?;
        let requires_grad = idx.iter().any(|&i| self.nodes[i].requires_grad);
        let node = if requires_grad {
            Node {
                value,
                op: Some(op),
                inputs: idx,
                requires_grad,
                is_param: false,
                saved,
            }
        } else {
            Node {
                value,
                op: None,
                inputs: Vec::new(),
                requires_grad: false,
                is_param: false,
                saved: Saved::None,
            }
        };
        Ok(self.push(node))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::ScalarMul(c), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var, ax1: usize, ax2: usize) -> Result<Var> {
        self.apply(Primitive::Transpose(ax1, ax2), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Reshape(shape), &[a])
    }

    pub fn gather(&mut self, a: Var, indices: Vec<Vec<usize>>, shared_table: bool) -> Result<Var> {
        self.apply(
            Primitive::Gather {
                indices,
                shared_table,
            },
            &[a],
        )
    }

    pub fn scatter(&mut self, a: Var, indices: Vec<Vec<usize>>, len: usize) -> Result<Var> {
        self.apply(Primitive::Scatter { indices, len }, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::LogSoftmax, &[a])
    }

    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        self.apply(Primitive::LayerNorm, &[x, scale, shift])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Gelu, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Mean { axis: None }, &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Mean { axis: Some(axis) }, &[a])
    }

    pub fn sum_of_squares(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SumOfSquares, &[a])
    }

    /// Reverse pass from a scalar `loss`. Every parameter leaf gets an entry,
    /// zero-filled when the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.check(loss)?;
        let loss_val = &self.nodes[li].value;
        if loss_val.numel() != 1 || loss_val.rank() != 0 {
            return Err(Error::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let input_grads = backward_op(op, &node.saved, &inputs, &node.value, &g);
            for (&j, gj) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                let Some(gj) = gj else { continue };
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&gj).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gj),
                }
            }
        }
        let mut out = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.is_param {
                continue;
            }
            let data = grads
                .get_mut(i)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; node.value.numel()]);
            let t = Tensor::new(node.value.shape().to_vec(), data)?;
            out.insert(
                Var {
                    graph: self.id,
                    index: i,
                },
                t,
            );
        }
        Ok(Gradients { grads: out })
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn is_suffix(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("kernel produced consistent shape")
}

fn gather_dims(
    x: &Tensor,
    indices: &[Vec<usize>],
    shared: bool,
    op: &'static str,
) -> Result<(usize, usize, usize, Vec<usize>)> {
    let shape = x.shape();
    let table_axis = if shared { 0 } else { 1 };
    if shape.len() < table_axis + 1 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![indices.len()],
        });
    }
    if !shared && shape[0] != indices.len() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![indices.len()],
        });
    }
    let n = shape[table_axis];
    let k = indices.first().map_or(0, Vec::len);
    if indices.iter().any(|r| r.len() != k) {
        return Err(Error::InconsistentDims(format!("{op}: ragged index rows")));
    }
    for &i in indices.iter().flatten() {
        if i >= n {
            return Err(Error::IndexOutOfRange { op, index: i, len: n });
        }
    }
    let trailing = shape[table_axis + 1..].to_vec();
    let f = trailing.iter().product();
    Ok((n, k, f, trailing))
}

fn forward(op: &Primitive, x: &[&Tensor]) -> Result<(Tensor, Saved)> {
    let out = match op {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let (a, b) = (x[0], x[1]);
            if !is_suffix(a.shape(), b.shape()) {
                return Err(mismatch(op.name(), a, b));
            }
            let period = b.numel().max(1);
            let bd = b.data();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &av)| {
                    let bv = bd[i % period];
                    match op {
                        Primitive::Add => av + bv,
                        Primitive::Sub => av - bv,
                        _ => av * bv,
                    }
                })
                .collect();
            tensor(a.shape().to_vec(), data)
        }
        Primitive::ScalarMul(c) => {
            tensor(x[0].shape().to_vec(), x[0].data().iter().map(|v| v * c).collect())
        }
        Primitive::MatMul => {
            let (a, b) = (x[0], x[1]);
            let (batch, m, k, n) = matmul_dims(a, b)?;
            let mut out = vec![0.0; batch * m * n];
            if b.rank() == 2 {
                kernels::gemm(a.data(), b.data(), &mut out, batch * m, k, n);
            } else {
                for bi in 0..batch {
                    kernels::gemm(
                        &a.data()[bi * m * k..(bi + 1) * m * k],
                        &b.data()[bi * k * n..(bi + 1) * k * n],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            tensor(shape, out)
        }
        Primitive::Transpose(a1, a2) => {
            let a = x[0];
            let (lo, hi) = ((*a1).min(*a2), (*a1).max(*a2));
            if hi >= a.rank() {
                return Err(Error::ShapeMismatch {
                    op: "transpose",
                    lhs: a.shape().to_vec(),
                    rhs: vec![*a1, *a2],
                });
            }
            if lo == hi {
                a.clone()
            } else {
                let mut shape = a.shape().to_vec();
                shape.swap(lo, hi);
                tensor(shape, kernels::swap_axes(a.data(), a.shape(), lo, hi))
            }
        }
        Primitive::Reshape(shape) => x[0].reshaped(shape.clone())?,
        Primitive::Gather {
            indices,
            shared_table,
        } => {
            let a = x[0];
            let (n, k, f, trailing) = gather_dims(a, indices, *shared_table, "index-gather")?;
            let b = indices.len();
            let mut out = Vec::with_capacity(b * k * f);
            for (bi, row) in indices.iter().enumerate() {
                let base = if *shared_table { 0 } else { bi * n * f };
                for &i in row {
                    out.extend_from_slice(&a.data()[base + i * f..base + (i + 1) * f]);
                }
            }
            let mut shape = vec![b, k];
            shape.extend(trailing);
            tensor(shape, out)
        }
        Primitive::Scatter { indices, len } => {
            let a = x[0];
            let shape = a.shape();
            if shape.len() < 2 || shape[0] != indices.len() {
                return Err(Error::ShapeMismatch {
                    op: "index-scatter",
                    lhs: shape.to_vec(),
                    rhs: vec![indices.len()],
                });
            }
            let (b, k) = (shape[0], shape[1]);
            if indices.iter().any(|r| r.len() != k) {
                return Err(Error::InconsistentDims("index-scatter: index rows".into()));
            }
            if let Some(&i) = indices.iter().flatten().find(|&&i| i >= *len) {
                return Err(Error::IndexOutOfRange {
                    op: "index-scatter",
                    index: i,
                    len: *len,
                });
            }
            let f: usize = shape[2..].iter().product();
            let mut out = vec![0.0; b * len * f];
            for (bi, row) in indices.iter().enumerate() {
                for (t, &i) in row.iter().enumerate() {
                    let src = &a.data()[(bi * k + t) * f..(bi * k + t + 1) * f];
                    let dst = &mut out[(bi * len + i) * f..(bi * len + i + 1) * f];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            let mut out_shape = vec![b, *len];
            out_shape.extend_from_slice(&shape[2..]);
            tensor(out_shape, out)
        }
        Primitive::Softmax | Primitive::LogSoftmax => {
            let a = x[0];
            let f = last_dim(a, op.name())?;
            let mut out = vec![0.0; a.numel()];
            for (src, dst) in a.data().chunks(f).zip(out.chunks_mut(f)) {
                if matches!(op, Primitive::Softmax) {
                    kernels::softmax_row(src, dst);
                } else {
                    kernels::log_softmax_row(src, dst);
                }
            }
            tensor(a.shape().to_vec(), out)
        }
        Primitive::LayerNorm => {
            let (a, scale, shift) = (x[0], x[1], x[2]);
            let f = last_dim(a, "layer-norm")?;
            if scale.shape() != [f] {
                return Err(mismatch("layer-norm", a, scale));
            }
            if shift.shape() != [f] {
                return Err(mismatch("layer-norm", a, shift));
            }
            let rows = a.numel() / f;
            let mut xhat = vec![0.0; a.numel()];
            let mut rstd = vec![0.0; rows];
            let mut out = vec![0.0; a.numel()];
            for r in 0..rows {
                let row = &a.data()[r * f..(r + 1) * f];
                let mean = row.iter().sum::<f64>() / f as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
                let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                rstd[r] = rs;
                for j in 0..f {
                    let h = (row[j] - mean) * rs;
                    xhat[r * f + j] = h;
                    out[r * f + j] = h * scale.data()[j] + shift.data()[j];
                }
            }
            return Ok((
                tensor(a.shape().to_vec(), out),
                Saved::LayerNorm { xhat, rstd },
            ));
        }
        Primitive::Gelu => tensor(
            x[0].shape().to_vec(),
            x[0].data().iter().map(|&v| kernels::gelu(v)).collect(),
        ),
        Primitive::Mean { axis } => {
            let a = x[0];
            match axis {
                None => {
                    if a.numel() == 0 {
                        return Err(Error::EmptyInput);
                    }
                    Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64)
                }
                Some(ax) => {
                    let (pre, d, post) = axis_split(a, *ax)?;
                    let mut out = vec![0.0; pre * post];
                    for p in 0..pre {
                        for i in 0..d {
                            let src = &a.data()[(p * d + i) * post..(p * d + i + 1) * post];
                            out[p * post..(p + 1) * post]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(o, s)| *o += s);
                        }
                    }
                    out.iter_mut().for_each(|o| *o /= d as f64);
                    let mut shape = a.shape().to_vec();
                    shape.remove(*ax);
                    tensor(shape, out)
                }
            }
        }
        Primitive::SumOfSquares => Tensor::scalar(x[0].data().iter().map(|v| v * v).sum()),
    };
    Ok((out, Saved::None))
}

fn last_dim(a: &Tensor, op: &'static str) -> Result<usize> {
    match a.shape().last() {
        Some(&f) if f > 0 => Ok(f),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

fn axis_split(a: &Tensor, ax: usize) -> Result<(usize, usize, usize)> {
    if ax >= a.rank() || a.shape()[ax] == 0 {
        return Err(Error::ShapeMismatch {
            op: "mean",
            lhs: a.shape().to_vec(),
            rhs: vec![ax],
        });
    }
    let s = a.shape();
    Ok((
        s[..ax].iter().product(),
        s[ax],
        s[ax + 1..].iter().product(),
    ))
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sb.len() < 2 {
        return Err(mismatch("matmul", a, b));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != k2 {
        return Err(mismatch("matmul", a, b));
    }
    let lead = &sa[..sa.len() - 2];
    if sb.len() > 2 && sb[..sb.len() - 2] != *lead {
        return Err(mismatch("matmul", a, b));
    }
    Ok((lead.iter().product(), m, k, n))
}

/// Sums a gradient of the left operand's shape down to the right operand's
/// (suffix) shape.
fn reduce_to_suffix(g: &[f64], period: usize) -> Vec<f64> {
    let mut out = vec![0.0; period];
    for chunk in g.chunks(period) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

fn backward_op(
    op: &Primitive,
    saved: &Saved,
    x: &[&Tensor],
    y: &Tensor,
    g: &[f64],
) -> Vec<Option<Vec<f64>>> {
    match op {
        Primitive::Add => {
            let period = x[1].numel().max(1);
            vec![Some(g.to_vec()), Some(reduce_to_suffix(g, period))]
        }
        Primitive::Sub => {
            let period = x[1].numel().max(1);
            let mut gb = reduce_to_suffix(g, period);
            gb.iter_mut().for_each(|v| *v = -*v);
            vec![Some(g.to_vec()), Some(gb)]
        }
        Primitive::Mul => {
            let (a, b) = (x[0].data(), x[1].data());
            let period = b.len().max(1);
            let ga = g.iter().enumerate().map(|(i, gv)| gv * b[i % period]).collect();
            let mut gb = vec![0.0; period];
            for (i, gv) in g.iter().enumerate() {
                gb[i % period] += gv * a[i];
            }
            vec![Some(ga), Some(gb)]
        }
        Primitive::ScalarMul(c) => vec![Some(g.iter().map(|v| v * c).collect())],
        Primitive::MatMul => {
            let (a, b) = (x[0], x[1]);
            let (batch, m, k, n) = matmul_dims(a, b).expect("validated in forward");
            let mut ga = vec![0.0; a.numel()];
            let mut gb = vec![0.0; b.numel()];
            if b.rank() == 2 {
                kernels::gemm_a_bt(g, b.data(), &mut ga, batch * m, k, n);
                kernels::gemm_at_b(a.data(), g, &mut gb, batch * m, k, n);
            } else {
                for bi in 0..batch {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    kernels::gemm_a_bt(
                        gs,
                        &b.data()[bi * k * n..(bi + 1) * k * n],
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                    kernels::gemm_at_b(
                        &a.data()[bi * m * k..(bi + 1) * m * k],
                        gs,
                        &mut gb[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
            vec![Some(ga), Some(gb)]
        }
        Primitive::Transpose(a1, a2) => {
            let (lo, hi) = ((*a1).min(*a2), (*a1).max(*a2));
            if lo == hi {
                vec![Some(g.to_vec())]
            } else {
                vec![Some(kernels::swap_axes(g, y.shape(), lo, hi))]
            }
        }
        Primitive::Reshape(_) => vec![Some(g.to_vec())],
        Primitive::Gather {
            indices,
            shared_table,
        } => {
            let a = x[0];
            let (n, k, f, _) =
                gather_dims(a, indices, *shared_table, "index-gather").expect("validated");
            let mut ga = vec![0.0; a.numel()];
            for (bi, row) in indices.iter().enumerate() {
                let base = if *shared_table { 0 } else { bi * n * f };
                for (t, &i) in row.iter().enumerate() {
                    let src = &g[(bi * k + t) * f..(bi * k + t + 1) * f];
                    ga[base + i * f..base + (i + 1) * f]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += s);
                }
            }
            vec![Some(ga)]
        }
        Primitive::Scatter { indices, len } => {
            let a = x[0];
            let k = a.shape()[1];
            let f: usize = a.shape()[2..].iter().product();
            let mut ga = Vec::with_capacity(a.numel());
            for (bi, row) in indices.iter().enumerate() {
                for &i in row.iter().take(k) {
                    ga.extend_from_slice(&g[(bi * len + i) * f..(bi * len + i + 1) * f]);
                }
            }
            vec![Some(ga)]
        }
        Primitive::Softmax => {
            let f = *y.shape().last().unwrap();
            let mut ga = vec![0.0; g.len()];
            for ((yr, gr), out) in y.data().chunks(f).zip(g.chunks(f)).zip(ga.chunks_mut(f)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..f {
                    out[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(ga)]
        }
        Primitive::LogSoftmax => {
            let f = *y.shape().last().unwrap();
            let mut ga = vec![0.0; g.len()];
            for ((yr, gr), out) in y.data().chunks(f).zip(g.chunks(f)).zip(ga.chunks_mut(f)) {
                let total: f64 = gr.iter().sum();
                for j in 0..f {
                    out[j] = gr[j] - yr[j].exp() * total;
                }
            }
            vec![Some(ga)]
        }
        Primitive::LayerNorm => {
            let Saved::LayerNorm { xhat, rstd } = saved else {
                unreachable!("layer-norm saves its statistics")
            };
            let scale = x[1].data();
            let f = scale.len();
            let mut gx = vec![0.0; g.len()];
            let mut gscale = vec![0.0; f];
            let mut gshift = vec![0.0; f];
            for (r, &rs) in rstd.iter().enumerate() {
                let gr = &g[r * f..(r + 1) * f];
                let hr = &xhat[r * f..(r + 1) * f];
                let mut mean_gh = 0.0;
                let mut mean_ghh = 0.0;
                for j in 0..f {
                    gshift[j] += gr[j];
                    gscale[j] += gr[j] * hr[j];
                    let gh = gr[j] * scale[j];
                    mean_gh += gh;
                    mean_ghh += gh * hr[j];
                }
                mean_gh /= f as f64;
                mean_ghh /= f as f64;
                for j in 0..f {
                    let gh = gr[j] * scale[j];
                    gx[r * f + j] = rs * (gh - mean_gh - hr[j] * mean_ghh);
                }
            }
            vec![Some(gx), Some(gscale), Some(gshift)]
        }
        Primitive::Gelu => vec![Some(
            x[0].data()
                .iter()
                .zip(g)
                .map(|(&v, gv)| gv * kernels::gelu_grad(v))
                .collect(),
        )],
        Primitive::Mean { axis } => {
            let a = x[0];
            match axis {
                None => {
                    let v = g[0] / a.numel() as f64;
                    vec![Some(vec![v; a.numel()])]
                }
                Some(ax) => {
                    let (pre, d, post) = axis_split(a, *ax).expect("validated");
                    let mut ga = vec![0.0; a.numel()];
                    for p in 0..pre {
                        let gs = &g[p * post..(p + 1) * post];
                        for i in 0..d {
                            ga[(p * d + i) * post..(p * d + i + 1) * post]
                                .iter_mut()
                                .zip(gs)
                                .for_each(|(o, s)| *o = s / d as f64);
                        }
                    }
                    vec![Some(ga)]
                }
            }
        }
        Primitive::SumOfSquares => vec![Some(x[0].data().iter().map(|v| 2.0 * v * g[0]).collect())],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn normalized_rows(rows: &[[f64; 6]]) -> Vec<(f64, f64, f64)> {
        let mut g = Graph::new();
        let x = g.constant(t(&[rows.len(), 6], rows.concat().as_slice()));
        let s = g.constant(Tensor::new(vec![6], vec![1.0; 6]).unwrap());
        let b = g.constant(Tensor::zeros(&[6]));
        let y = g.layer_norm(x, s, b).unwrap();
        g.value(y)
            .data()
            .chunks(6)
            .zip(rows)
            .map(|(r, src)| {
                let mean = r.iter().sum::<f64>() / 6.0;
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
                let m = src.iter().sum::<f64>() / 6.0;
                let src_var = src.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 6.0;
                (mean, var, src_var)
            })
            .collect()
    }

    #[test]
    fn layer_norm_rows_centered_unit_variance() {
        let rows = [
            [0.3, -1.2, 2.5, 0.0, 7.1, -3.3],
            [120.0, -45.0, 300.0, 8.0, -260.0, 51.0],
            [0.001, 0.002, -0.001, 0.0, 0.003, -0.002],
        ];
        for (mean, var, src_var) in normalized_rows(&rows) {
            assert!(mean.abs() <= 1e-10, "mean {mean}");
            let expect = src_var / (src_var + LAYER_NORM_EPS);
            assert!((var - expect).abs() <= 1e-12, "{var} vs {expect}");
            if src_var > 100.0 {
                assert!((var - 1.0).abs() <= 1e-8, "large-scale variance {var}");
            }
        }
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[0., 0., 0.]));
        let s = g.softmax(a).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gelu_zero() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(0.0));
        let y = g.gelu(a).unwrap();
        assert_eq!(g.value(y).item(), Some(0.0));
    }

    #[test]
    fn grad_of_square() {
        let mut g = Graph::new();
        let p = g.param(t(&[1], &[3.0]));
        let l = g.sum_of_squares(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[6.0]);
    }

    #[test]
    fn identity_chain_passes_upstream_through() {
        let mut g = Graph::new();
        let p = g.param(t(&[1, 2], &[0.5, -1.5]));
        let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let h = g.matmul(p, i).unwrap();
        let h = g.matmul(h, i).unwrap();
        let w = g.constant(t(&[2], &[2.0, -3.0]));
        let h = g.mul(h, w).unwrap();
        let l = g.mean(h).unwrap();
        let grads = g.backward(l).unwrap();
        // d mean(w * p) / dp = w / 2
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, -1.5]);
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        let err = g.add(a, b).unwrap_err();
        match err {
            Error::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_primitive_name() {
        assert!(matches!(
            Primitive::from_name("conv2d"),
            Err(Error::UnknownPrimitive(_))
        ));
        assert_eq!(Primitive::from_name("gelu").unwrap(), Primitive::Gelu);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let p = g.param(Tensor::zeros(&[2]));
        let y = g.scale(p, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn detached_loss_rejected() {
        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let p = g2.param(Tensor::zeros(&[2]));
        let l = g2.sum_of_squares(p).unwrap();
        let _ = g1.constant(Tensor::scalar(0.0));
        assert!(matches!(g1.backward(l), Err(Error::DetachedGraph)));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let p = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.mul(p, c).unwrap();
        let l = g.sum_of_squares(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.len(), 1);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn unreached_params_get_zero_gradient() {
        let mut g = Graph::new();
        let p = g.param(t(&[2], &[1.0, 2.0]));
        let q = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let l = g.sum_of_squares(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(q).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn backward_is_pure() {
        let mut g = Graph::new();
        let p = g.param(t(&[2, 3], &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6]));
        let s = g.softmax(p).unwrap();
        let h = g.gelu(s).unwrap();
        let l = g.sum_of_squares(h).unwrap();
        assert_eq!(g.backward(l).unwrap(), g.backward(l).unwrap());
    }

    #[test]
    fn gather_then_scatter_round_trip() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3, 2], &[1., 2., 3., 4., 5., 6.]));
        let gathered = g.gather(x, vec![vec![2, 0]], false).unwrap();
        assert_eq!(g.value(gathered).data(), &[5., 6., 1., 2.]);
        let back = g.scatter(gathered, vec![vec![2, 0]], 3).unwrap();
        assert_eq!(g.value(back).data(), &[1., 2., 0., 0., 5., 6.]);
    }

    #[test]
    fn shared_table_gather() {
        let mut g = Graph::new();
        let table = g.constant(t(&[3, 1], &[10., 20., 30.]));
        let y = g.gather(table, vec![vec![0, 2], vec![1, 1]], true).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 2, 1]);
        assert_eq!(g.value(y).data(), &[10., 30., 20., 20.]);
    }

    #[test]
    fn leading_batch_broadcast_only() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[2, 3, 4], 1.0));
        let bias = g.constant(Tensor::full(&[4], 0.5));
        let row = g.constant(Tensor::full(&[3, 4], 2.0));
        let bad = g.constant(Tensor::full(&[2, 1, 4], 2.0));
        assert!(g.add(a, bias).is_ok());
        assert!(g.mul(a, row).is_ok());
        assert!(g.add(a, bad).is_err());
    }
}
