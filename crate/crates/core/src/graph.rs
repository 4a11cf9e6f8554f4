//! Reverse-mode automatic differentiation over an arena of tensor nodes.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every operation applied to
//! it. Parameter leaves are referenced, not copied. [`Graph::backward`] walks
//! the arena in reverse insertion order, which is a valid topological order
//! because a node can only reference nodes created before it.
//!
//! Every operation checks its output for non-finite values and reports the
//! offending op by name.

use alloc::vec;
use alloc::vec::Vec;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};

/// Minimum row norm accepted by [`Graph::l2_normalize`].
pub const EPS_NORM: f64 = 1e-12;
/// Lower clamp applied to the probability inside [`Graph::cross_entropy`].
pub const EPS_LOG: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param(ParamId),
    Const,
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Transpose(NodeId),
    MatVec(NodeId, NodeId),
    VecMat(NodeId, NodeId),
    Linear {
        w: NodeId,
        x: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    L2Rows(NodeId),
    Concat(Vec<NodeId>),
    ConcatCols(NodeId, NodeId),
    Reshape(NodeId),
    Slice { a: NodeId, start: usize },
    StackRows(Vec<NodeId>),
    Row { a: NodeId, index: usize },
    GatherRows { a: NodeId, rows: Vec<Option<usize>> },
    Dropout { a: NodeId, mask: Vec<f64> },
    CrossEntropy { p: NodeId, target: usize },
    Sum(NodeId),
    AddN(Vec<NodeId>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    // Empty for parameter leaves; their value lives in the store.
    value: Tensor,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

fn check(op: &'static str, data: &[f64]) -> Result<(), TensorError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    t.dims2().ok_or(TensorError::Rank {
        op,
        rank: t.rank(),
    })
}

fn dims1(op: &'static str, t: &Tensor) -> Result<usize, TensorError> {
    match t.shape() {
        [n] => Ok(*n),
        s => Err(TensorError::Rank { op, rank: s.len() }),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

// out[m×n] += a[m×k] · b[k×n]
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

// out[m×n] += a[m×k] · b[n×k]ᵀ
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// out[k×n] += a[m×k]ᵀ · b[m×n]
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(src) {
                *a += b;
            }
        }
        None => *dst = Some(src.to_vec()),
    }
}

fn slot_for(dst: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; len])
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match self.nodes[id.0].op {
            Op::Param(p) => self.params.get(p),
            _ => &self.nodes[id.0].value,
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        op: Op,
        value: Tensor,
        requires_grad: bool,
    ) -> Result<NodeId, TensorError> {
        check(name, value.data())?;
        Ok(self.push(op, value, requires_grad))
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let trainable = self.params.is_trainable(id);
        let n = self.push(Op::Param(id), Tensor::zeros(&[0]), trainable);
        self.param_nodes[id.0] = Some(n);
        n
    }

    /// Constant leaf; gradients are not propagated into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul", av)?;
        let (k2, n) = dims2("matmul", bv)?;
        if k != k2 {
            return Err(mismatch("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(
            "matmul",
            Op::MatMul(a, b),
            Tensor::from_parts(vec![m, n], out),
            rg,
        )
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul_nt", av)?;
        let (n, k2) = dims2("matmul_nt", bv)?;
        if k != k2 {
            return Err(mismatch("matmul_nt", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(
            "matmul_nt",
            Op::MatMulNT(a, b),
            Tensor::from_parts(vec![m, n], out),
            rg,
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        let (m, n) = dims2("transpose", av)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av.data()[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::Transpose(a), Tensor::from_parts(vec![n, m], out), rg))
    }

    /// `m · v` for `m: [r×c]`, `v: [c]`.
    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId, TensorError> {
        let (mv, vv) = (self.value(m), self.value(v));
        let (r, c) = dims2("matvec", mv)?;
        if dims1("matvec", vv)? != c {
            return Err(mismatch("matvec", mv, vv));
        }
        let mut out = vec![0.0; r];
        gemm_nt(mv.data(), vv.data(), &mut out, r, c, 1);
        let rg = self.rg(m) || self.rg(v);
        self.push_checked(
            "matvec",
            Op::MatVec(m, v),
            Tensor::from_parts(vec![r], out),
            rg,
        )
    }

    /// `vᵀ · m` for `v: [r]`, `m: [r×c]`; a weighted sum of the rows of `m`.
    pub fn vecmat(&mut self, v: NodeId, m: NodeId) -> Result<NodeId, TensorError> {
        let (vv, mv) = (self.value(v), self.value(m));
        let (r, c) = dims2("vecmat", mv)?;
        if dims1("vecmat", vv)? != r {
            return Err(mismatch("vecmat", vv, mv));
        }
        let mut out = vec![0.0; c];
        gemm_nn(vv.data(), mv.data(), &mut out, 1, r, c);
        let rg = self.rg(m) || self.rg(v);
        self.push_checked(
            "vecmat",
            Op::VecMat(v, m),
            Tensor::from_parts(vec![c], out),
            rg,
        )
    }

    /// Affine map `W x + b`. A rank-2 `x` is treated as a batch of rows.
    pub fn linear(
        &mut self,
        w: NodeId,
        x: NodeId,
        b: Option<NodeId>,
    ) -> Result<NodeId, TensorError> {
        let (wv, xv) = (self.value(w), self.value(x));
        let (o, i) = dims2("linear", wv)?;
        let (rows, shape) = match xv.shape() {
            [n] if *n == i => (1, vec![o]),
            [r, n] if *n == i => (*r, vec![*r, o]),
            _ => return Err(mismatch("linear", wv, xv)),
        };
        let mut out = vec![0.0; rows * o];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [o] {
                return Err(mismatch("linear bias", wv, bv));
            }
            for r in 0..rows {
                out[r * o..(r + 1) * o].copy_from_slice(bv.data());
            }
        }
        gemm_nt(xv.data(), wv.data(), &mut out, rows, i, o);
        let rg = self.rg(w) || self.rg(x) || b.is_some_and(|b| self.rg(b));
        self.push_checked(
            "linear",
            Op::Linear { w, x, b },
            Tensor::from_parts(shape, out),
            rg,
        )
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av, bv));
        }
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), out);
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(name, op, t, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map_op(
        &mut self,
        name: &'static str,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        let t = Tensor::from_parts(av.shape().to_vec(), av.data().iter().map(|x| f(*x)).collect());
        let rg = self.rg(a);
        self.push_checked(name, op, t, rg)
    }

    pub fn scale(&mut self, a: NodeId, f: f64) -> Result<NodeId, TensorError> {
        self.map_op("scale", a, |x| x * f, Op::Scale(a, f))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.map_op("tanh", a, libm::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.map_op("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.map_op("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// Softmax of a vector, stabilised by subtracting the maximum.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        let n = dims1("softmax", av)?;
        if n == 0 {
            return Err(TensorError::Rank { op: "softmax", rank: 0 });
        }
        let out = softmax_slice(av.data());
        let rg = self.rg(a);
        self.push_checked("softmax", Op::Softmax(a), Tensor::from_parts(vec![n], out), rg)
    }

    /// L2 normalization of a vector, or of every row of a matrix independently.
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        let cols = match av.shape() {
            [n] => *n,
            [_, c] => *c,
            s => {
                return Err(TensorError::Rank {
                    op: "l2_normalize",
                    rank: s.len(),
                })
            }
        };
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum());
            if !(norm > EPS_NORM) {
                return Err(TensorError::DegenerateNorm { norm });
            }
            for v in row {
                *v /= norm;
            }
        }
        let t = Tensor::from_parts(av.shape().to_vec(), out);
        let rg = self.rg(a);
        self.push_checked("l2_normalize", Op::L2Rows(a), t, rg)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            dims1("concat", v)?;
            out.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let n = out.len();
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::from_parts(vec![n], out), rg))
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (r, ca) = dims2("concat_cols", av)?;
        let (r2, cb) = dims2("concat_cols", bv)?;
        if r != r2 {
            return Err(mismatch("concat_cols", av, bv));
        }
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(av.row(i));
            out.extend_from_slice(bv.row(i));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Op::ConcatCols(a, b),
            Tensor::from_parts(vec![r, ca + cb], out),
            rg,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        if shape.iter().product::<usize>() != av.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: av.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let t = Tensor::from_parts(shape.to_vec(), av.data().to_vec());
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a), t, rg))
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        let n = dims1("slice", av)?;
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                len: n,
            });
        }
        let t = Tensor::from_parts(vec![len], av.data()[start..start + len].to_vec());
        let rg = self.rg(a);
        Ok(self.push(Op::Slice { a, start }, t, rg))
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId, TensorError> {
        let first = rows.first().ok_or(TensorError::Rank {
            op: "stack_rows",
            rank: 0,
        })?;
        let c = dims1("stack_rows", self.value(*first))?;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            let v = self.value(r);
            if v.shape() != [c] {
                return Err(mismatch("stack_rows", self.value(*first), v));
            }
            out.extend_from_slice(v.data());
        }
        let rg = rows.iter().any(|&r| self.rg(r));
        Ok(self.push(
            Op::StackRows(rows.to_vec()),
            Tensor::from_parts(vec![rows.len(), c], out),
            rg,
        ))
    }

    pub fn row(&mut self, a: NodeId, index: usize) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        let (r, c) = dims2("row", av)?;
        if index >= r {
            return Err(TensorError::IndexOutOfRange { index, len: r });
        }
        let t = Tensor::from_parts(vec![c], av.row(index).to_vec());
        let rg = self.rg(a);
        Ok(self.push(Op::Row { a, index }, t, rg))
    }

    /// Selects rows of a matrix by index; `None` yields a zero row.
    pub fn gather_rows(
        &mut self,
        a: NodeId,
        rows: &[Option<usize>],
    ) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        let (r, c) = dims2("gather_rows", av)?;
        let mut out = Vec::with_capacity(rows.len() * c);
        for idx in rows {
            match idx {
                Some(i) if *i < r => out.extend_from_slice(av.row(*i)),
                Some(i) => return Err(TensorError::IndexOutOfRange { index: *i, len: r }),
                None => out.extend(core::iter::repeat(0.0).take(c)),
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
            Tensor::from_parts(vec![rows.len(), c], out),
            rg,
        ))
    }

    /// Multiplies by a precomputed mask; inverted dropout passes masks with
    /// entries in `{0, 1/(1-p)}`.
    pub fn dropout_mask(&mut self, a: NodeId, mask: Vec<f64>) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        if mask.len() != av.len() {
            return Err(TensorError::ShapeMismatch {
                op: "dropout",
                left: av.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let out = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), out);
        let rg = self.rg(a);
        Ok(self.push(Op::Dropout { a, mask }, t, rg))
    }

    /// Inverted dropout with a Bernoulli keep mask drawn from `rng`.
    pub fn dropout<R: rand::Rng + ?Sized>(
        &mut self,
        a: NodeId,
        p: f64,
        rng: &mut R,
    ) -> Result<NodeId, TensorError> {
        if p <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let n = self.value(a).len();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.dropout_mask(a, mask)
    }

    /// `-ln max(p[target], EPS_LOG)` for a probability vector `p`.
    pub fn cross_entropy(&mut self, p: NodeId, target: usize) -> Result<NodeId, TensorError> {
        let pv = self.value(p);
        let n = dims1("cross_entropy", pv)?;
        if target >= n {
            return Err(TensorError::IndexOutOfRange { index: target, len: n });
        }
        let loss = -libm::log(pv.data()[target].max(EPS_LOG));
        let rg = self.rg(p);
        self.push_checked(
            "cross_entropy",
            Op::CrossEntropy { p, target },
            Tensor::scalar(loss),
            rg,
        )
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push_checked("sum", Op::Sum(a), Tensor::scalar(s), rg)
    }

    pub fn add_n(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let first = parts.first().ok_or(TensorError::Rank { op: "add_n", rank: 0 })?;
        let mut out = self.value(*first).clone();
        for &p in &parts[1..] {
            let v = self.value(p);
            if v.shape() != out.shape() {
                return Err(mismatch("add_n", &out, v));
            }
            out.add_assign(v);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push_checked("add_n", Op::AddN(parts.to_vec()), out, rg)
    }

    /// Reverse sweep from a scalar root; returns gradients for every trainable parameter reached.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, TensorError> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: rv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut out = Gradients::new(self.params.len());

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let y = self.value(NodeId(idx));
            match &node.op {
                Op::Param(p) => out.accumulate_slice(*p, y.shape(), &g),
                Op::Const => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = av.dims2().unwrap();
                    let n = bv.shape()[1];
                    if self.rg(*a) {
                        let d = slot_for(&mut grads[a.0], m * k);
                        gemm_nt(&g, bv.data(), d, m, n, k);
                    }
                    if self.rg(*b) {
                        let d = slot_for(&mut grads[b.0], k * n);
                        gemm_tn(av.data(), &g, d, m, k, n);
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = av.dims2().unwrap();
                    let n = bv.shape()[0];
                    if self.rg(*a) {
                        let d = slot_for(&mut grads[a.0], m * k);
                        gemm_nn(&g, bv.data(), d, m, n, k);
                    }
                    if self.rg(*b) {
                        let d = slot_for(&mut grads[b.0], n * k);
                        gemm_tn(&g, av.data(), d, m, n, k);
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = self.value(*a).dims2().unwrap();
                    let d = slot_for(&mut grads[a.0], m * n);
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                }
                Op::MatVec(m, v) => {
                    let (mv, vv) = (self.value(*m), self.value(*v));
                    let (r, c) = mv.dims2().unwrap();
                    if self.rg(*m) {
                        let d = slot_for(&mut grads[m.0], r * c);
                        gemm_nn(&g, vv.data(), d, r, 1, c);
                    }
                    if self.rg(*v) {
                        let d = slot_for(&mut grads[v.0], c);
                        gemm_nn(&g, mv.data(), d, 1, r, c);
                    }
                }
                Op::VecMat(v, m) => {
                    let (vv, mv) = (self.value(*v), self.value(*m));
                    let (r, c) = mv.dims2().unwrap();
                    if self.rg(*v) {
                        let d = slot_for(&mut grads[v.0], r);
                        gemm_nt(&g, mv.data(), d, 1, c, r);
                    }
                    if self.rg(*m) {
                        let d = slot_for(&mut grads[m.0], r * c);
                        gemm_nn(vv.data(), &g, d, r, 1, c);
                    }
                }
                Op::Linear { w, x, b } => {
                    let (wv, xv) = (self.value(*w), self.value(*x));
                    let (o, i) = wv.dims2().unwrap();
                    let rows = xv.len() / i;
                    if self.rg(*w) {
                        let d = slot_for(&mut grads[w.0], o * i);
                        gemm_tn(&g, xv.data(), d, rows, o, i);
                    }
                    if self.rg(*x) {
                        let d = slot_for(&mut grads[x.0], rows * i);
                        gemm_nn(&g, wv.data(), d, rows, o, i);
                    }
                    if let Some(b) = b {
                        if self.rg(*b) {
                            let d = slot_for(&mut grads[b.0], o);
                            for r in 0..rows {
                                for (a, gv) in d.iter_mut().zip(&g[r * o..(r + 1) * o]) {
                                    *a += gv;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for n in [a, b] {
                        if self.rg(*n) {
                            add_into(&mut grads[n.0], &g);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if self.rg(*a) {
                        let d = slot_for(&mut grads[a.0], g.len());
                        for ((d, gv), o) in d.iter_mut().zip(&g).zip(bv) {
                            *d += gv * o;
                        }
                    }
                    if self.rg(*b) {
                        let d = slot_for(&mut grads[b.0], g.len());
                        for ((d, gv), o) in d.iter_mut().zip(&g).zip(av) {
                            *d += gv * o;
                        }
                    }
                }
                Op::Scale(a, f) => {
                    let d = slot_for(&mut grads[a.0], g.len());
                    for (d, gv) in d.iter_mut().zip(&g) {
                        *d += gv * f;
                    }
                }
                Op::Tanh(a) => {
                    let d = slot_for(&mut grads[a.0], g.len());
                    for ((d, gv), yv) in d.iter_mut().zip(&g).zip(y.data()) {
                        *d += gv * (1.0 - yv * yv);
                    }
                }
                Op::Sigmoid(a) => {
                    let d = slot_for(&mut grads[a.0], g.len());
                    for ((d, gv), yv) in d.iter_mut().zip(&g).zip(y.data()) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
                Op::Relu(a) => {
                    let d = slot_for(&mut grads[a.0], g.len());
                    for ((d, gv), yv) in d.iter_mut().zip(&g).zip(y.data()) {
                        if *yv > 0.0 {
                            *d += gv;
                        }
                    }
                }
                Op::Softmax(a) => {
                    let dot: f64 = g.iter().zip(y.data()).map(|(a, b)| a * b).sum();
                    let d = slot_for(&mut grads[a.0], g.len());
                    for ((d, gv), yv) in d.iter_mut().zip(&g).zip(y.data()) {
                        *d += yv * (gv - dot);
                    }
                }
                Op::L2Rows(a) => {
                    let xv = self.value(*a);
                    let cols = *xv.shape().last().unwrap();
                    let d = slot_for(&mut grads[a.0], g.len());
                    for ((drow, grow), (yrow, xrow)) in d
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(y.data().chunks(cols).zip(xv.data().chunks(cols)))
                    {
                        let norm = libm::sqrt(xrow.iter().map(|v| v * v).sum());
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv += (gv - yv * dot) / norm;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        if self.rg(*p) {
                            add_into(&mut grads[p.0], &g[off..off + n]);
                        }
                        off += n;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (r, ca) = self.value(*a).dims2().unwrap();
                    let cb = self.value(*b).shape()[1];
                    let w = ca + cb;
                    if self.rg(*a) {
                        let d = slot_for(&mut grads[a.0], r * ca);
                        for i in 0..r {
                            for (dv, gv) in d[i * ca..(i + 1) * ca].iter_mut().zip(&g[i * w..i * w + ca]) {
                                *dv += gv;
                            }
                        }
                    }
                    if self.rg(*b) {
                        let d = slot_for(&mut grads[b.0], r * cb);
                        for i in 0..r {
                            for (dv, gv) in d[i * cb..(i + 1) * cb]
                                .iter_mut()
                                .zip(&g[i * w + ca..(i + 1) * w])
                            {
                                *dv += gv;
                            }
                        }
                    }
                }
                Op::Reshape(a) => add_into(&mut grads[a.0], &g),
                Op::Slice { a, start } => {
                    let n = self.value(*a).len();
                    let d = slot_for(&mut grads[a.0], n);
                    for (dv, gv) in d[*start..*start + g.len()].iter_mut().zip(&g) {
                        *dv += gv;
                    }
                }
                Op::StackRows(rows) => {
                    let c = g.len() / rows.len();
                    for (i, r) in rows.iter().enumerate() {
                        if self.rg(*r) {
                            add_into(&mut grads[r.0], &g[i * c..(i + 1) * c]);
                        }
                    }
                }
                Op::Row { a, index } => {
                    let n = self.value(*a).len();
                    let c = g.len();
                    let d = slot_for(&mut grads[a.0], n);
                    for (dv, gv) in d[index * c..(index + 1) * c].iter_mut().zip(&g) {
                        *dv += gv;
                    }
                }
                Op::GatherRows { a, rows } => {
                    let av = self.value(*a);
                    let c = av.shape()[1];
                    let d = slot_for(&mut grads[a.0], av.len());
                    for (k, idx) in rows.iter().enumerate() {
                        if let Some(i) = idx {
                            for (dv, gv) in d[i * c..(i + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                                *dv += gv;
                            }
                        }
                    }
                }
                Op::Dropout { a, mask } => {
                    let d = slot_for(&mut grads[a.0], g.len());
                    for ((dv, gv), m) in d.iter_mut().zip(&g).zip(mask) {
                        *dv += gv * m;
                    }
                }
                Op::CrossEntropy { p, target } => {
                    let pv = self.value(*p);
                    let d = slot_for(&mut grads[p.0], pv.len());
                    let pt = pv.data()[*target];
                    if pt > EPS_LOG {
                        d[*target] -= g[0] / pt;
                    }
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    let d = slot_for(&mut grads[a.0], n);
                    for dv in d.iter_mut() {
                        *dv += g[0];
                    }
                }
                Op::AddN(parts) => {
                    for p in parts {
                        if self.rg(*p) {
                            add_into(&mut grads[p.0], &g);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| libm::exp(v - max)).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}
