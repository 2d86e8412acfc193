//! Dense `f64` tensors and a tape-based reverse-mode differentiation graph.
//!
//! [`Tensor`] is a plain value (shape plus row-major data) with no graph
//! attached; it is `Send + Sync` and immutable once built unless you own it.
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value and whatever the backward rule needs. Nodes are handed out as
//! [`Var`] handles. Because nodes can only reference earlier nodes, the tape
//! order is already topological and [`Graph::backward`] is a single reverse
//! sweep that visits each node once.
//!
//! Shapes are rank 1 or rank 2. Elementwise binary ops accept either equal
//! shapes or a rank-2 operand paired with a rank-1 operand matching its
//! trailing extent (broadcast over the leading batch dimension).

use crate::error::{Error, Result};
use crate::rng;
use rand::Rng as _;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the leading dimension.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Extent of the trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows `idx` of a rank-2 tensor, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 || idx.is_empty() {
            return Err(Error::invalid("select_rows needs a rank-2 tensor and a nonempty index"));
        }
        let mut data = Vec::with_capacity(idx.len() * self.cols());
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::matrix(idx.len(), self.cols(), data)
    }
}

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable operation families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Relu,
    Tanh,
    Exp,
    Log,
    Softplus,
    Sigmoid,
    Clamp,
    Sum,
    Mean,
    Concat,
    Slice,
    Dropout,
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Relu,
        OpKind::Tanh,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Softplus,
        OpKind::Sigmoid,
        OpKind::Clamp,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Dropout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Softplus => "softplus",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Clamp => "clamp",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Dropout => "dropout",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Concat(Var, Var),
    Slice(Var, usize, usize),
    Dropout(Var, Vec<f64>),
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Relu(..) => OpKind::Relu,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Softplus(..) => OpKind::Softplus,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Concat(..) => OpKind::Concat,
            Op::Slice(..) => OpKind::Slice,
            Op::Dropout(..) => OpKind::Dropout,
        })
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// How the smaller operand of an elementwise op lines up with the larger.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Broadcast {
    Same,
    /// rhs is a row repeated over the leading dimension of lhs
    Rhs,
    /// lhs is a row repeated over the leading dimension of rhs
    Lhs,
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if a.len() == 2 && b.len() == 1 && a[1] == b[0] {
        Ok(Broadcast::Rhs)
    } else if b.len() == 2 && a.len() == 1 && b[1] == a[0] {
        Ok(Broadcast::Lhs)
    } else {
        Err(Error::shape(op, a, b))
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow for large |x|
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `[n,k] x [k,m]` row-major product.
fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `A^T` for row-major `[n,k]`.
fn transpose_raw(a: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for p in 0..k {
            out[p * n + i] = a[i * k + p];
        }
    }
    out
}

/// Reverse-mode tape. See the module docs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    fault: Option<OpKind>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Deliberately breaks the backward rule of one op family. Only used to
    /// show that the gradient checker catches a wrong rule.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Op families recorded on the tape, in tape order.
    pub fn recorded_ops(&self) -> Vec<OpKind> {
        self.nodes.iter().filter_map(|n| n.op.kind()).collect()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient left by the last backward pass; `None` if the node does not
    /// require grad or was unreachable from the root.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Nothing downstream can differentiate through a constant subgraph.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- forward ops ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb[0] != sa[1] || sb.len() > 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (n, k) = (sa[0], sa[1]);
        let m = if sb.len() == 2 { sb[1] } else { 1 };
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        let shape = if sb.len() == 2 { vec![n, m] } else { vec![n] };
        Ok(self.push(Tensor { shape, data }, &[a, b], Op::MatMul(a, b)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let bc = broadcast(name, self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let value = match bc {
            Broadcast::Same => Tensor {
                shape: va.shape.clone(),
                data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
            },
            Broadcast::Rhs => {
                let w = vb.len();
                Tensor {
                    shape: va.shape.clone(),
                    data: va.data.iter().enumerate().map(|(i, &x)| f(x, vb.data[i % w])).collect(),
                }
            }
            Broadcast::Lhs => {
                let w = va.len();
                Tensor {
                    shape: vb.shape.clone(),
                    data: vb.data.iter().enumerate().map(|(i, &y)| f(va.data[i % w], y)).collect(),
                }
            }
        };
        Ok(self.push(value, &[a, b], op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        self.push(value, &[x], op)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| c * v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v < 0.0 { 0.0 } else { v }, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), &[x], Op::Mean(x))
    }

    /// Concatenate along the trailing axis. Both operands must have the same
    /// rank and, for rank 2, the same number of rows.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || (sa.len() == 2 && sa[0] != sb[0]) {
            return Err(Error::shape("concat", &sa, &sb));
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows = if sa.len() == 2 { sa[0] } else { 1 };
        let (va, vb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&va.data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&vb.data[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        Ok(self.push(Tensor { shape, data }, &[a, b], Op::Concat(a, b)))
    }

    /// Columns `start..end` of the trailing axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap();
        if start >= end || end > c {
            return Err(Error::shape("slice", &s, &[start, end]));
        }
        let rows = if s.len() == 2 { s[0] } else { 1 };
        let v = self.value(x);
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&v.data[r * c + start..r * c + end]);
        }
        let mut shape = s.clone();
        *shape.last_mut().unwrap() = end - start;
        Ok(self.push(Tensor { shape, data }, &[x], Op::Slice(x, start, end)))
    }

    /// Inverted dropout. With `train == false` (or `rate == 0`) this returns
    /// `x` itself. Otherwise each element is kept with probability
    /// `1 - rate` and scaled by `1 / (1 - rate)`; the mask depends only on
    /// `seed`.
    pub fn dropout(&mut self, x: Var, rate: f64, train: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mut r = rng::rng(&[rng::STREAM_DROPOUT, seed]);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if r.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().zip(&mask).map(|(a, m)| a * m).collect(),
        };
        Ok(self.push(value, &[x], Op::Dropout(x, mask)))
    }

    // ---- backward -------------------------------------------------------

    /// Clears all gradients, then back-propagates from `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.zero_grad();
        self.backward_accumulate(root)
    }

    /// Back-propagates from `root`, adding into any gradients already held.
    pub fn backward_accumulate(&mut self, root: Var) -> Result<()> {
        let rs = self.shape(root);
        if rs.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot(rs.to_vec()));
        }
        self.grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        pending[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            self.propagate(i, &g, &mut pending);
            let node = &self.nodes[i];
            match &mut self.grads[i] {
                Some(acc) => acc.data.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => {
                    *slot = Some(Tensor {
                        shape: node.value.shape.clone(),
                        data: g,
                    })
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn propagate(&self, i: usize, g: &[f64], pending: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let corrupt = match (self.fault, node.op.kind()) {
            (Some(f), Some(k)) => f == k,
            _ => false,
        };
        let mut send = |v: Var, mut contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            if corrupt {
                contrib.iter_mut().for_each(|c| *c *= 1.25);
            }
            match &mut pending[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (sa, sb) = (val(a).shape(), val(b).shape());
                let (n, k) = (sa[0], sa[1]);
                let m = if sb.len() == 2 { sb[1] } else { 1 };
                if self.nodes[a.0].requires_grad {
                    // dA = G B^T
                    let bt = transpose_raw(val(b).data(), k, m);
                    send(a, matmul_raw(g, &bt, n, m, k));
                }
                if self.nodes[b.0].requires_grad {
                    // dB = A^T G
                    let at = transpose_raw(val(a).data(), n, k);
                    send(b, matmul_raw(&at, g, k, n, m));
                }
            }
            &Op::Add(a, b) | &Op::Sub(a, b) | &Op::Mul(a, b) => {
                let bc = broadcast("", val(a).shape(), val(b).shape()).expect("checked in forward");
                let (da, db): (Vec<f64>, Vec<f64>) = match node.op {
                    Op::Add(..) => (g.to_vec(), g.to_vec()),
                    Op::Sub(..) => (g.to_vec(), g.iter().map(|x| -x).collect()),
                    _ => {
                        let (va, vb) = (val(a).data(), val(b).data());
                        let at = |idx: usize, d: &[f64]| d[idx % d.len()];
                        (
                            g.iter().enumerate().map(|(j, gj)| gj * at(j, vb)).collect(),
                            g.iter().enumerate().map(|(j, gj)| gj * at(j, va)).collect(),
                        )
                    }
                };
                let fold = |full: Vec<f64>, w: usize| {
                    let mut r = vec![0.0; w];
                    for (j, x) in full.iter().enumerate() {
                        r[j % w] += x;
                    }
                    r
                };
                match bc {
                    Broadcast::Same => {
                        send(a, da);
                        send(b, db);
                    }
                    Broadcast::Rhs => {
                        send(a, da);
                        send(b, fold(db, val(b).len()));
                    }
                    Broadcast::Lhs => {
                        send(a, fold(da, val(a).len()));
                        send(b, db);
                    }
                }
            }
            &Op::Scale(x, c) => send(x, g.iter().map(|gi| gi * c).collect()),
            &Op::AddScalar(x) => send(x, g.to_vec()),
            &Op::Relu(x) => send(
                x,
                g.iter()
                    .zip(val(x).data())
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                    .collect(),
            ),
            &Op::Tanh(x) => send(x, g.iter().zip(out.data()).map(|(gi, y)| gi * (1.0 - y * y)).collect()),
            &Op::Exp(x) => send(x, g.iter().zip(out.data()).map(|(gi, y)| gi * y).collect()),
            &Op::Log(x) => send(x, g.iter().zip(val(x).data()).map(|(gi, xi)| gi / xi).collect()),
            &Op::Softplus(x) => send(
                x,
                g.iter().zip(val(x).data()).map(|(gi, &xi)| gi * sigmoid(xi)).collect(),
            ),
            &Op::Sigmoid(x) => send(x, g.iter().zip(out.data()).map(|(gi, y)| gi * y * (1.0 - y)).collect()),
            &Op::Clamp(x, lo, hi) => send(
                x,
                g.iter()
                    .zip(val(x).data())
                    .map(|(gi, &xi)| if xi > lo && xi < hi { *gi } else { 0.0 })
                    .collect(),
            ),
            &Op::Sum(x) => send(x, vec![g[0]; val(x).len()]),
            &Op::Mean(x) => {
                let n = val(x).len();
                send(x, vec![g[0] / n as f64; n])
            }
            &Op::Concat(a, b) => {
                let (ca, cb) = (val(a).cols(), val(b).cols());
                let rows = val(a).len() / ca;
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = &g[r * (ca + cb)..(r + 1) * (ca + cb)];
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                send(a, ga);
                send(b, gb);
            }
            &Op::Slice(x, start, end) => {
                let c = val(x).cols();
                let w = end - start;
                let rows = val(x).len() / c;
                let mut gx = vec![0.0; val(x).len()];
                for r in 0..rows {
                    gx[r * c + start..r * c + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                send(x, gx);
            }
            Op::Dropout(x, mask) => send(*x, g.iter().zip(mask).map(|(gi, m)| gi * m).collect()),
        }
    }
}
