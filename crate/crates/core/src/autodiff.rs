//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as a node whose parents precede it, so
//! the insertion order is already a topological order and [`Tape::backward`]
//! is a single reverse sweep. Tensors are rank 2 (`rows × cols`) for every op
//! except the elementwise ones, [`Tape::reshape`] and the full reductions.
//!
//! Binary elementwise ops broadcast their right operand in three ways only:
//! a single element, a `1 × n` row repeated down the rows, or an `m × 1`
//! column repeated across the columns.

use crate::error::{Error, Result};
use crate::special::{ln_gamma, psi, psi1};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
    Col,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Square(Var),
    Lgamma(Var),
    Digamma(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    SumRows(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    LogSumExp(Var),
    LogSoftmax(Var),
    ClassMask(Var, ClassMaskSpec),
}

#[derive(Debug, Clone)]
struct ClassMaskSpec {
    labels: Vec<usize>,
    classes: usize,
    dim: usize,
    bias: bool,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One forward/backward computation. Single-threaded; build a fresh tape per
/// step.
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Finite-value checks follow `debug_assertions`.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is collected by [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa == sb {
            return Ok(Bcast::Same);
        }
        if self.value(b).len() == 1 {
            return Ok(Bcast::Scalar);
        }
        match (sa, sb) {
            ([_, n], [1, n2]) if n == n2 => Ok(Bcast::Row),
            ([m, _], [m2, 1]) if m == m2 => Ok(Bcast::Col),
            _ => Err(Error::shape(op, sa, sb)),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let bc = self.bcast(name, a, b)?;
        let out = apply_bcast(self.value(a), self.value(b), bc, f);
        self.push(name, out, make(a, b, bc), &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(name, out, op, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("shift", a, |x| x + c, Op::Shift(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn lgamma(&mut self, a: Var) -> Result<Var> {
        check_positive("lgamma", self.value(a))?;
        self.unary("lgamma", a, ln_gamma, Op::Lgamma(a))
    }

    pub fn digamma(&mut self, a: Var) -> Result<Var> {
        check_positive("digamma", self.value(a))?;
        self.unary("digamma", a, psi, Op::Digamma(a))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.sum() / t.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Per-row sums: `m × n → m × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).sum_cols()?;
        self.push("sum_cols", out, Op::SumCols(a), &[a])
    }

    /// Per-column sums: `m × n → 1 × n`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).sum_rows()?;
        self.push("sum_rows", out, Op::SumRows(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Joins matrices along `axis` (0 stacks rows, 1 stacks columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::InvalidArgument(format!(
                "concat of {} parts along axis {axis}",
                parts.len()
            )));
        }
        let (rows0, cols0) = self.value(parts[0]).dims2()?;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            let ok = if axis == 0 { c == cols0 } else { r == rows0 };
            if !ok {
                return Err(Error::shape("concat", self.value(parts[0]).shape(), &[r, c]));
            }
            dims.push((r, c));
        }
        let out = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * cols0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::new(&[rows, cols0], data)?
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(rows0 * cols);
            for i in 0..rows0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row_slice(i));
                }
            }
            Tensor::new(&[rows0, cols], data)?
        };
        self.push(
            "concat",
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// The half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let src = self.value(a);
        let (r, c) = src.dims2()?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start > end || end > extent {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{end} on axis {axis} of shape {:?}",
                src.shape()
            )));
        }
        let out = if axis == 0 {
            Tensor::new(&[end - start, c], src.data()[start * c..end * c].to_vec())?
        } else {
            let w = end - start;
            let mut data = Vec::with_capacity(r * w);
            for i in 0..r {
                data.extend_from_slice(&src.row_slice(i)[start..end]);
            }
            Tensor::new(&[r, w], data)?
        };
        self.push("slice", out, Op::Slice { src: a, axis, start }, &[a])
    }

    /// Row-wise `log Σ exp`, shifted by the row maximum: `m × n → m × 1`.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let (r, _) = src.dims2()?;
        let data = (0..r).map(|i| lse(src.row_slice(i))).collect();
        let out = Tensor::new(&[r, 1], data)?;
        self.push("log_sum_exp", out, Op::LogSumExp(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let (r, c) = src.dims2()?;
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = src.row_slice(i);
            let l = lse(row);
            data.extend(row.iter().map(|&x| x - l));
        }
        let out = Tensor::new(&[r, c], data)?;
        self.push("log_softmax", out, Op::LogSoftmax(a), &[a])
    }

    /// Keeps only the block of `labels[r]` in each row of `a`
    /// (`m × classes·dim`) and, when `bias` is set, prefixes every block with
    /// its one-hot indicator. See [`class_mask`].
    pub fn class_mask(
        &mut self,
        a: Var,
        labels: &[usize],
        classes: usize,
        dim: usize,
        bias: bool,
    ) -> Result<Var> {
        let out = class_mask(self.value(a), labels, classes, dim, bias)?;
        let spec = ClassMaskSpec {
            labels: labels.to_vec(),
            classes,
            dim,
            bias,
        };
        self.push("class_mask", out, Op::ClassMask(a, spec), &[a])
    }

    /// Reverse sweep from a single-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = self.value(root);
        if root_val.len() != 1 {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(root_val.shape()));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, t: Tensor| -> Result<()> {
            if !self.nodes[v.0].needs_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        let wants = |v: Var| self.nodes[v.0].needs_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    send(*a, g.matmul_nt(val(*b))?)?;
                }
                if wants(*b) {
                    send(*b, val(*a).matmul_tn(g)?)?;
                }
            }
            Op::Add(a, b, bc) => {
                send(*a, g.clone())?;
                if wants(*b) {
                    send(*b, reduce_bcast(g, val(*b), *bc)?)?;
                }
            }
            Op::Sub(a, b, bc) => {
                send(*a, g.clone())?;
                if wants(*b) {
                    send(*b, reduce_bcast(&g.map(|x| -x), val(*b), *bc)?)?;
                }
            }
            Op::Mul(a, b, bc) => {
                if wants(*a) {
                    send(*a, apply_bcast(g, val(*b), *bc, |x, y| x * y))?;
                }
                if wants(*b) {
                    let prod = g.zip_with(val(*a), |x, y| x * y)?;
                    send(*b, reduce_bcast(&prod, val(*b), *bc)?)?;
                }
            }
            Op::Scale(a, c) => send(*a, g.map(|x| x * c))?,
            Op::Shift(a) => send(*a, g.clone())?,
            Op::Exp(a) => send(*a, g.zip_with(&node.value, |x, y| x * y)?)?,
            Op::Log(a) => send(*a, g.zip_with(val(*a), |x, y| x / y)?)?,
            Op::Tanh(a) => send(*a, g.zip_with(&node.value, |x, y| x * (1.0 - y * y))?)?,
            Op::Relu(a) => send(
                *a,
                g.zip_with(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })?,
            )?,
            Op::Sigmoid(a) => send(*a, g.zip_with(&node.value, |x, s| x * s * (1.0 - s))?)?,
            Op::Softplus(a) => send(*a, g.zip_with(val(*a), |x, y| x * sigmoid(y))?)?,
            Op::Square(a) => send(*a, g.zip_with(val(*a), |x, y| 2.0 * x * y)?)?,
            Op::Lgamma(a) => send(*a, g.zip_with(val(*a), |x, y| x * psi(y))?)?,
            Op::Digamma(a) => send(*a, g.zip_with(val(*a), |x, y| x * psi1(y))?)?,
            Op::Sum(a) => {
                let gv = g.data()[0];
                send(*a, Tensor::full(val(*a).shape(), gv))?;
            }
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                send(*a, Tensor::full(val(*a).shape(), g.data()[0] / n))?;
            }
            Op::SumCols(a) => {
                let (r, c) = val(*a).dims2()?;
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    data.extend(std::iter::repeat_n(g.data()[i], c));
                }
                send(*a, Tensor::new(&[r, c], data)?)?;
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).dims2()?;
                let mut data = Vec::with_capacity(r * c);
                for _ in 0..r {
                    data.extend_from_slice(g.data());
                }
                send(*a, Tensor::new(&[r, c], data)?)?;
            }
            Op::Reshape(a) => send(*a, g.reshape(val(*a).shape())?)?,
            Op::Concat { parts, axis } => {
                let (rows, cols) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = val(p).dims2()?;
                    if wants(p) {
                        let piece = if *axis == 0 {
                            Tensor::new(&[pr, pc], g.data()[offset * cols..(offset + pr) * cols].to_vec())?
                        } else {
                            let mut data = Vec::with_capacity(pr * pc);
                            for i in 0..rows {
                                data.extend_from_slice(&g.row_slice(i)[offset..offset + pc]);
                            }
                            Tensor::new(&[pr, pc], data)?
                        };
                        send(p, piece)?;
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Slice { src, axis, start } => {
                let (r, c) = val(*src).dims2()?;
                let (gr, gc) = g.dims2()?;
                let mut full = Tensor::zeros(&[r, c]);
                let data = full.data_mut();
                if *axis == 0 {
                    data[start * c..(start + gr) * c].copy_from_slice(g.data());
                } else {
                    for i in 0..r {
                        data[i * c + start..i * c + start + gc].copy_from_slice(g.row_slice(i));
                    }
                }
                send(*src, full)?;
            }
            Op::LogSumExp(a) => {
                let src = val(*a);
                let (r, c) = src.dims2()?;
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    let l = node.value.data()[i];
                    let gi = g.data()[i];
                    data.extend(src.row_slice(i).iter().map(|&x| gi * (x - l).exp()));
                }
                send(*a, Tensor::new(&[r, c], data)?)?;
            }
            Op::LogSoftmax(a) => {
                let (r, c) = node.value.dims2()?;
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    let gs: f64 = g.row_slice(i).iter().sum();
                    data.extend(
                        g.row_slice(i)
                            .iter()
                            .zip(node.value.row_slice(i))
                            .map(|(&gv, &lp)| gv - lp.exp() * gs),
                    );
                }
                send(*a, Tensor::new(&[r, c], data)?)?;
            }
            Op::ClassMask(a, spec) => {
                let (r, c) = val(*a).dims2()?;
                let width = spec.dim + usize::from(spec.bias);
                let offset = usize::from(spec.bias);
                let mut out = Tensor::zeros(&[r, c]);
                let data = out.data_mut();
                for (i, &y) in spec.labels.iter().enumerate() {
                    let grow = g.row_slice(i);
                    for j in 0..spec.dim {
                        data[i * c + y * spec.dim + j] = grow[y * width + offset + j];
                    }
                }
                debug_assert_eq!(c, spec.classes * spec.dim);
                send(*a, out)?;
            }
        }
        Ok(())
    }
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for a bound parameter set, zero-filled where unused.
    pub fn for_params(&self, bound: &BoundParams, tape: &Tape) -> Vec<Tensor> {
        bound
            .vars
            .iter()
            .map(|&v| {
                self.get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
            })
            .collect()
    }
}

/// Named tensors with stable insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.names.push(name);
        self.tensors.push(value);
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index_of(name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if self.tensors[i].shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", self.tensors[i].shape(), value.shape()));
        }
        self.tensors[i] = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Raw element buffers in store order, for in-place updates.
    pub fn buffers_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.tensors.iter_mut().map(Tensor::data_mut)
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on the tape as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self.tensors.iter().map(|t| tape.variable(t.clone())).collect();
        BoundParams {
            names: self.names.clone(),
            vars,
        }
    }
}

/// Tape handles for a [`ParamStore`], in store order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Masks a `rows × classes·dim` matrix of class blocks.
///
/// Row `r` keeps only block `labels[r]`. With `bias`, each block becomes
/// `[1, z]` for the kept class and all zeros otherwise, so the output is
/// `rows × classes·(dim + 1)`; without it the output is `rows × classes·dim`.
pub fn class_mask(
    src: &Tensor,
    labels: &[usize],
    classes: usize,
    dim: usize,
    bias: bool,
) -> Result<Tensor> {
    let (rows, cols) = src.dims2()?;
    if cols != classes * dim || labels.len() != rows {
        return Err(Error::shape("class_mask", src.shape(), &[labels.len(), classes * dim]));
    }
    let width = dim + usize::from(bias);
    let out_cols = classes * width;
    let mut out = vec![0.0; rows * out_cols];
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::OutOfRange {
                what: "class label",
                index: y,
                len: classes,
            });
        }
        let base = r * out_cols + y * width;
        if bias {
            out[base] = 1.0;
        }
        let block = &src.row_slice(r)[y * dim..(y + 1) * dim];
        out[base + usize::from(bias)..base + width].copy_from_slice(block);
    }
    Tensor::new(&[rows, out_cols], out)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn lse(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn check_positive(func: &'static str, t: &Tensor) -> Result<()> {
    match t.data().iter().find(|&&x| !(x > 0.0)) {
        Some(&value) => Err(Error::Domain { func, value }),
        None => Ok(()),
    }
}

fn apply_bcast(a: &Tensor, b: &Tensor, bc: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = a.clone();
    let bd = b.data();
    match bc {
        Bcast::Same => {
            for (o, &y) in out.data_mut().iter_mut().zip(bd) {
                *o = f(*o, y);
            }
        }
        Bcast::Scalar => {
            let y = bd[0];
            for o in out.data_mut() {
                *o = f(*o, y);
            }
        }
        Bcast::Row => {
            let n = bd.len();
            for (k, o) in out.data_mut().iter_mut().enumerate() {
                *o = f(*o, bd[k % n]);
            }
        }
        Bcast::Col => {
            let n = a.shape()[1];
            for (k, o) in out.data_mut().iter_mut().enumerate() {
                *o = f(*o, bd[k / n]);
            }
        }
    }
    out
}

/// Sums a full-shape gradient down to the broadcast operand's shape.
fn reduce_bcast(g: &Tensor, b: &Tensor, bc: Bcast) -> Result<Tensor> {
    match bc {
        Bcast::Same => Ok(g.clone()),
        Bcast::Scalar => Tensor::new(b.shape(), vec![g.sum()]),
        Bcast::Row => g.sum_rows(),
        Bcast::Col => g.sum_cols(),
    }
}
