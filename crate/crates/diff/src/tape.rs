//! Operation tape for reverse-mode differentiation.
//!
//! Every op appends a node holding its value; nodes only reference earlier
//! nodes, so the node index order is a topological order and the backward
//! pass is a single reverse sweep.

use std::ops::Index;
use std::sync::Arc;

use crate::error::{DiffError, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{Dual, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    Transpose(Var),
    Reshape(Var),
    GatherRows(Var, Arc<[usize]>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    SegmentSoftmax(Var, Arc<[usize]>),
    SegmentSum(Var, Arc<[usize]>),
    SumCols(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Exp(Var),
    Relu(Var),
    Cos(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Parameter leaves created by [`Tape::bind`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    clamped: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DiffError::Shape {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

fn segments_valid(offsets: &[usize], rows: usize) -> bool {
    !offsets.is_empty()
        && offsets[0] == 0
        && *offsets.last().unwrap() == rows
        && offsets.windows(2).all(|w| w[0] <= w[1])
}

/// Row-wise softmax with max subtraction. The shift is a constant, so it
/// does not perturb dual tangents.
fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let c = x.cols();
    for r in 0..x.rows() {
        let row = &mut out.data_mut()[r * c..(r + 1) * c];
        softmax_in_place(row);
    }
    out
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.re()));
    let shift = T::from_f64(m);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - shift).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn logsumexp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.re()));
    let shift = T::from_f64(m);
    let mut total = T::zero();
    for &v in row {
        total += (v - shift).exp();
    }
    shift + total.ln()
}

fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x.re() >= 0.0 {
        -((-x).exp().ln_1p())
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x.re() >= 0.0 {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            clamped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Entries raised to the floor by [`Tape::clamp_min`] so far.
    pub fn clamp_count(&self) -> usize {
        self.clamped
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Reads a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, op: Op, value: Tensor<T>, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(DiffError::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param => true,
            op => inputs(op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(Op::Leaf, value, "constant")
    }

    pub fn constant_f64(&mut self, value: &Tensor<f64>) -> Result<Var> {
        let t = Tensor::from_vec(
            value.rows(),
            value.cols(),
            value.data().iter().map(|&x| T::from_f64(x)).collect(),
        );
        self.constant(t)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(Op::Param, value, "param")
    }

    /// Creates one differentiable leaf per tensor in `store`.
    pub fn bind(&mut self, store: &ParamStore) -> Result<Bound> {
        let mut vars = Vec::with_capacity(store.num_tensors());
        for id in store.ids() {
            let t = store.get(id);
            let conv = Tensor::from_vec(t.rows(), t.cols(), t.data().iter().map(|&x| T::from_f64(x)).collect());
            vars.push(self.leaf(conv)?);
        }
        Ok(Bound { vars })
    }

    /// Binds every tensor of `store` as a constant (no gradients flow).
    pub fn bind_frozen(&mut self, store: &ParamStore) -> Result<Bound> {
        let mut vars = Vec::with_capacity(store.num_tensors());
        for id in store.ids() {
            vars.push(self.constant_f64(store.get(id))?);
        }
        Ok(Bound { vars })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(DiffError::Shape {
                op: "matmul",
                lhs: av.shape(),
                rhs: bv.shape(),
            });
        }
        let out = av.matmul(bv);
        self.push(Op::MatMul(a, b), out, "matmul")
    }

    /// Elementwise sum of equal shapes, or `[m,n] + [1,n]` row broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let mut out = av.clone();
            out.add_assign(bv);
            return self.push(Op::Add(a, b), out, "add");
        }
        if bv.rows() == 1 && bv.cols() == av.cols() {
            let mut out = av.clone();
            let n = av.cols();
            let brow = bv.data().to_vec();
            for row in out.data_mut().chunks_mut(n.max(1)) {
                for (o, &b) in row.iter_mut().zip(&brow) {
                    *o += b;
                }
            }
            return self.push(Op::AddRow(a, b), out, "add");
        }
        Err(DiffError::Shape {
            op: "add",
            lhs: av.shape(),
            rhs: bv.shape(),
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same("sub", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        self.push(Op::Sub(a, b), out, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same("mul", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        self.push(Op::Mul(a, b), out, "mul")
    }

    /// Scales row `i` of `a` by `c[i]`, with `c` an `[m,1]` column.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(c));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(DiffError::Shape {
                op: "mul_col",
                lhs: av.shape(),
                rhs: cv.shape(),
            });
        }
        let n = av.cols();
        let mut out = av.clone();
        for (r, row) in out.data_mut().chunks_mut(n.max(1)).enumerate() {
            let s = cv.data()[r];
            for o in row.iter_mut() {
                *o = *o * s;
            }
        }
        self.push(Op::MulCol(a, c), out, "mul_col")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.scale(c));
        self.push(Op::Scale(a, c), out, "scale")
    }

    /// `[a | b]` along columns.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(DiffError::Shape {
                op: "concat",
                lhs: av.shape(),
                rhs: bv.shape(),
            });
        }
        let (m, p, q) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            data.extend_from_slice(av.row_slice(r));
            data.extend_from_slice(bv.row_slice(r));
        }
        let out = Tensor::from_vec(m, p + q, data);
        self.push(Op::ConcatCols(a, b), out, "concat")
    }

    /// `a` stacked on top of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(DiffError::Shape {
                op: "concat_rows",
                lhs: av.shape(),
                rhs: bv.shape(),
            });
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let out = Tensor::from_vec(av.rows() + bv.rows(), av.cols(), data);
        self.push(Op::ConcatRows(a, b), out, "concat_rows")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), out, "transpose")
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let av = self.value(a);
        if av.len() != rows * cols {
            return Err(DiffError::Shape {
                op: "reshape",
                lhs: av.shape(),
                rhs: [rows, cols],
            });
        }
        let out = Tensor::from_vec(rows, cols, av.data().to_vec());
        self.push(Op::Reshape(a), out, "reshape")
    }

    /// Output row `r` is row `idx[r]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: impl Into<Arc<[usize]>>) -> Result<Var> {
        let idx: Arc<[usize]> = idx.into();
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
            return Err(DiffError::Invalid {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {:?}", av.shape()),
            });
        }
        let n = av.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            data.extend_from_slice(av.row_slice(i));
        }
        let out = Tensor::from_vec(idx.len(), n, data);
        self.push(Op::GatherRows(a, idx), out, "gather_rows")
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a));
        self.push(Op::SoftmaxRows(a), out, "softmax")
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        let mut out = av.clone();
        for r in 0..av.rows() {
            let lse = logsumexp(av.row_slice(r));
            for v in &mut out.data_mut()[r * c..(r + 1) * c] {
                *v = *v - lse;
            }
        }
        self.push(Op::LogSoftmaxRows(a), out, "log_softmax")
    }

    /// `[m,n] -> [m,1]` stabilised log-sum-exp per row.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| logsumexp(av.row_slice(r))).collect();
        let out = Tensor::column(data);
        self.push(Op::LogSumExpRows(a), out, "logsumexp_rows")
    }

    /// Softmax of an `[n,1]` column within each segment
    /// `offsets[s]..offsets[s+1]`.
    pub fn segment_softmax(&mut self, a: Var, offsets: impl Into<Arc<[usize]>>) -> Result<Var> {
        let offsets: Arc<[usize]> = offsets.into();
        let av = self.value(a);
        if av.cols() != 1 || !segments_valid(&offsets, av.rows()) {
            return Err(DiffError::Invalid {
                op: "segment_softmax",
                msg: format!("bad segments for {:?}", av.shape()),
            });
        }
        let mut out = av.clone();
        for w in offsets.windows(2) {
            softmax_in_place(&mut out.data_mut()[w[0]..w[1]]);
        }
        self.push(Op::SegmentSoftmax(a, offsets), out, "segment_softmax")
    }

    /// Sums the rows of each segment: `[n,d] -> [segments,d]`.
    pub fn segment_sum(&mut self, a: Var, offsets: impl Into<Arc<[usize]>>) -> Result<Var> {
        let offsets: Arc<[usize]> = offsets.into();
        let av = self.value(a);
        if !segments_valid(&offsets, av.rows()) {
            return Err(DiffError::Invalid {
                op: "segment_sum",
                msg: format!("bad segments for {:?}", av.shape()),
            });
        }
        let d = av.cols();
        let segs = offsets.len() - 1;
        let mut out = Tensor::zeros(segs, d);
        for s in 0..segs {
            let orow = &mut out.data_mut()[s * d..(s + 1) * d];
            for r in offsets[s]..offsets[s + 1] {
                for (o, &x) in orow.iter_mut().zip(av.row_slice(r)) {
                    *o += x;
                }
            }
        }
        self.push(Op::SegmentSum(a, offsets), out, "segment_sum")
    }

    /// Row sums as an `[m,1]` column.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let data = (0..av.rows())
            .map(|r| {
                let mut acc = T::zero();
                for &x in av.row_slice(r) {
                    acc += x;
                }
                acc
            })
            .collect();
        let out = Tensor::column(data);
        self.push(Op::SumCols(a), out, "sum_cols")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), out, "sigmoid")
    }

    /// `log σ(x)`, computed without forming σ.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(log_sigmoid);
        self.push(Op::LogSigmoid(a), out, "log_sigmoid")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.ln());
        self.push(Op::Log(a), out, "log")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.exp());
        self.push(Op::Exp(a), out, "exp")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x.re() > 0.0 { x } else { T::zero() });
        self.push(Op::Relu(a), out, "relu")
    }

    /// Elementwise cosine.
    pub fn cos(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.cos());
        self.push(Op::Cos(a), out, "cos")
    }

    /// `max(x, floor)` elementwise; raised entries get zero gradient.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let mut hits = 0;
        let out = {
            let av = self.value(a);
            let data = av
                .data()
                .iter()
                .map(|&x| {
                    if x.re() > floor {
                        x
                    } else {
                        hits += 1;
                        T::from_f64(floor)
                    }
                })
                .collect();
            Tensor::from_vec(av.rows(), av.cols(), data)
        };
        self.clamped += hits;
        self.push(Op::ClampMin(a, floor), out, "clamp_min")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let mut acc = T::zero();
        for &x in self.value(a).data() {
            acc += x;
        }
        self.push(Op::Sum(a), Tensor::scalar(acc), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(DiffError::Invalid {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let mut acc = T::zero();
        for &x in av.data() {
            acc += x;
        }
        let n = av.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(acc.scale(1.0 / n)), "mean")
    }

    /// Reverse sweep from a 1×1 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(DiffError::NotScalar(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, g.matmul_t(self.value(*b)));
                }
                if needs(*b) {
                    acc(*b, self.value(*a).t_matmul(g));
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::AddRow(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    let n = g.cols();
                    let mut col = Tensor::zeros(1, n);
                    for row in g.data().chunks(n.max(1)) {
                        for (o, &x) in col.data_mut().iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    acc(*b, col);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    acc(*b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    acc(*a, zip_map(g, bv, |x, y| x * y));
                }
                if needs(*b) {
                    acc(*b, zip_map(g, av, |x, y| x * y));
                }
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (self.value(*a), self.value(*c));
                let n = av.cols();
                if needs(*a) {
                    let mut ga = g.clone();
                    for (r, row) in ga.data_mut().chunks_mut(n.max(1)).enumerate() {
                        let s = cv.data()[r];
                        for o in row.iter_mut() {
                            *o = *o * s;
                        }
                    }
                    acc(*a, ga);
                }
                if needs(*c) {
                    let data = (0..av.rows())
                        .map(|r| {
                            let mut s = T::zero();
                            for (&x, &gx) in av.row_slice(r).iter().zip(g.row_slice(r)) {
                                s += x * gx;
                            }
                            s
                        })
                        .collect();
                    acc(*c, Tensor::column(data));
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    let c = *c;
                    acc(*a, g.map(|x| x.scale(c)));
                }
            }
            Op::ConcatCols(a, b) => {
                let p = self.value(*a).cols();
                let q = self.value(*b).cols();
                let m = g.rows();
                if needs(*a) {
                    let mut d = Vec::with_capacity(m * p);
                    for r in 0..m {
                        d.extend_from_slice(&g.row_slice(r)[..p]);
                    }
                    acc(*a, Tensor::from_vec(m, p, d));
                }
                if needs(*b) {
                    let mut d = Vec::with_capacity(m * q);
                    for r in 0..m {
                        d.extend_from_slice(&g.row_slice(r)[p..]);
                    }
                    acc(*b, Tensor::from_vec(m, q, d));
                }
            }
            Op::ConcatRows(a, b) => {
                let ra = self.value(*a).rows();
                let n = g.cols();
                if needs(*a) {
                    acc(*a, Tensor::from_vec(ra, n, g.data()[..ra * n].to_vec()));
                }
                if needs(*b) {
                    let rb = g.rows() - ra;
                    acc(*b, Tensor::from_vec(rb, n, g.data()[ra * n..].to_vec()));
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    acc(*a, g.transpose());
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    let av = self.value(*a);
                    acc(*a, Tensor::from_vec(av.rows(), av.cols(), g.data().to_vec()));
                }
            }
            Op::GatherRows(a, idx) => {
                if needs(*a) {
                    let av = self.value(*a);
                    let n = av.cols();
                    let mut ga = Tensor::zeros(av.rows(), n);
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = &mut ga.data_mut()[src * n..(src + 1) * n];
                        for (o, &x) in dst.iter_mut().zip(g.row_slice(r)) {
                            *o += x;
                        }
                    }
                    acc(*a, ga);
                }
            }
            Op::SoftmaxRows(a) => {
                if needs(*a) {
                    let n = y.cols();
                    let mut ga = Tensor::zeros(y.rows(), n);
                    for r in 0..y.rows() {
                        softmax_vjp(y.row_slice(r), g.row_slice(r), &mut ga.data_mut()[r * n..(r + 1) * n]);
                    }
                    acc(*a, ga);
                }
            }
            Op::LogSoftmaxRows(a) => {
                if needs(*a) {
                    let n = y.cols();
                    let mut ga = g.clone();
                    for r in 0..y.rows() {
                        let mut gs = T::zero();
                        for &x in g.row_slice(r) {
                            gs += x;
                        }
                        let out = &mut ga.data_mut()[r * n..(r + 1) * n];
                        for (o, &ly) in out.iter_mut().zip(y.row_slice(r)) {
                            *o = *o - ly.exp() * gs;
                        }
                    }
                    acc(*a, ga);
                }
            }
            Op::LogSumExpRows(a) => {
                if needs(*a) {
                    let av = self.value(*a);
                    let n = av.cols();
                    let mut ga = av.clone();
                    for r in 0..av.rows() {
                        let lse = y.data()[r];
                        let gr = g.data()[r];
                        for o in &mut ga.data_mut()[r * n..(r + 1) * n] {
                            *o = (*o - lse).exp() * gr;
                        }
                    }
                    acc(*a, ga);
                }
            }
            Op::SegmentSoftmax(a, offsets) => {
                if needs(*a) {
                    let mut ga = Tensor::zeros(y.rows(), 1);
                    for w in offsets.windows(2) {
                        let (s, e) = (w[0], w[1]);
                        softmax_vjp(&y.data()[s..e], &g.data()[s..e], &mut ga.data_mut()[s..e]);
                    }
                    acc(*a, ga);
                }
            }
            Op::SegmentSum(a, offsets) => {
                if needs(*a) {
                    let av = self.value(*a);
                    let d = av.cols();
                    let mut ga = Tensor::zeros(av.rows(), d);
                    for s in 0..offsets.len() - 1 {
                        let gs = g.row_slice(s);
                        for r in offsets[s]..offsets[s + 1] {
                            ga.data_mut()[r * d..(r + 1) * d].copy_from_slice(gs);
                        }
                    }
                    acc(*a, ga);
                }
            }
            Op::SumCols(a) => {
                if needs(*a) {
                    let av = self.value(*a);
                    let n = av.cols();
                    let mut ga = Tensor::zeros(av.rows(), n);
                    for (r, row) in ga.data_mut().chunks_mut(n.max(1)).enumerate() {
                        let gr = g.data()[r];
                        row.iter_mut().for_each(|o| *o = gr);
                    }
                    acc(*a, ga);
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    acc(*a, zip_map(g, y, |gx, s| gx * s * (T::one() - s)));
                }
            }
            Op::LogSigmoid(a) => {
                if needs(*a) {
                    let av = self.value(*a);
                    acc(*a, zip_map(g, av, |gx, x| gx * sigmoid(-x)));
                }
            }
            Op::Log(a) => {
                if needs(*a) {
                    acc(*a, zip_map(g, self.value(*a), |gx, x| gx / x));
                }
            }
            Op::Exp(a) => {
                if needs(*a) {
                    acc(*a, zip_map(g, y, |gx, e| gx * e));
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    acc(
                        *a,
                        zip_map(g, self.value(*a), |gx, x| if x.re() > 0.0 { gx } else { T::zero() }),
                    );
                }
            }
            Op::Cos(a) => {
                if needs(*a) {
                    acc(*a, zip_map(g, self.value(*a), |gx, x| -(gx * x.sin())));
                }
            }
            Op::ClampMin(a, floor) => {
                if needs(*a) {
                    let f = *floor;
                    acc(
                        *a,
                        zip_map(g, self.value(*a), |gx, x| if x.re() > f { gx } else { T::zero() }),
                    );
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let av = self.value(*a);
                    let gv = g.data()[0];
                    acc(*a, Tensor::from_vec(av.rows(), av.cols(), vec![gv; av.len()]));
                }
            }
            Op::Mean(a) => {
                if needs(*a) {
                    let av = self.value(*a);
                    let gv = g.data()[0].scale(1.0 / av.len() as f64);
                    acc(*a, Tensor::from_vec(av.rows(), av.cols(), vec![gv; av.len()]));
                }
            }
        }
    }
}

impl Tape<Dual> {
    /// Binds `store` with tangent direction `tangent` (flat layout).
    pub fn bind_tangent(&mut self, store: &ParamStore, tangent: &[f64]) -> Result<Bound> {
        if tangent.len() != store.len() {
            return Err(DiffError::Length {
                expected: store.len(),
                got: tangent.len(),
            });
        }
        let mut vars = Vec::with_capacity(store.num_tensors());
        for id in store.ids() {
            let t = store.get(id);
            let range = store.slice_of(id);
            let data = t
                .data()
                .iter()
                .zip(&tangent[range])
                .map(|(&x, &e)| Dual::new(x, e))
                .collect();
            vars.push(self.leaf(Tensor::from_vec(t.rows(), t.cols(), data))?);
        }
        Ok(Bound { vars })
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

fn softmax_vjp<T: Scalar>(y: &[T], g: &[T], out: &mut [T]) {
    let mut dot = T::zero();
    for (&yi, &gi) in y.iter().zip(g) {
        dot += yi * gi;
    }
    for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(g) {
        *o = yi * (gi - dot);
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Param => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::AddRow(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::MulCol(a, b)
        | Op::ConcatCols(a, b)
        | Op::ConcatRows(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Transpose(a)
        | Op::Reshape(a)
        | Op::GatherRows(a, _)
        | Op::SoftmaxRows(a)
        | Op::LogSoftmaxRows(a)
        | Op::LogSumExpRows(a)
        | Op::SegmentSoftmax(a, _)
        | Op::SegmentSum(a, _)
        | Op::SumCols(a)
        | Op::Sigmoid(a)
        | Op::LogSigmoid(a)
        | Op::Log(a)
        | Op::Exp(a)
        | Op::Relu(a)
        | Op::Cos(a)
        | Op::ClampMin(a, _)
        | Op::Sum(a)
        | Op::Mean(a) => vec![*a],
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Flat gradient over every tensor in `store`, zeros where the loss
    /// does not depend on a parameter.
    pub fn flat(&self, bound: &Bound, store: &ParamStore) -> Vec<T> {
        let mut out = vec![T::zero(); store.len()];
        for id in store.ids() {
            if let Some(g) = self.wrt(bound[id]) {
                out[store.slice_of(id)].copy_from_slice(g.data());
            }
        }
        out
    }
}
