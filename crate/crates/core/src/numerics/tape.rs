//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation eagerly: node values are computed as
//! soon as the op is pushed, and the op kind plus its input ids are kept so
//! that [`Tape::backward`] can replay the graph in reverse. Node ids are
//! handed out in creation order, so the node list is already a topological
//! order and the backward sweep is a single reverse pass.

use serde::{Deserialize, Serialize};

use super::matrix::{gemm_nn, gemm_tn, Matrix};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// x (n×k) · wᵀ where w is m×k
    MatMulT(Var, Var),
    /// x (n×m) + b (1×m) added to every row
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    /// n×c -> 1×c
    MeanRows(Var),
    /// 1×c -> n×c
    BroadcastRows(Var, usize),
    ConcatCols(Var, Var),
    /// softmax applied independently to consecutive column segments of each row
    SegmentSoftmax(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    /// column n×1 -> column P×1 with entries v[i] - v[j]
    PairDiff(Var, Vec<(usize, usize)>),
    /// mean cross-entropy of row-wise softmax(logits) against class labels
    SoftmaxCrossEntropy(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, zeros if `v` did not influence the output.
    pub fn wrt(&self, v: Var, like: &Matrix) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.adjoints.get_mut(v.0).and_then(Option::take)
    }
}

fn scalar(v: f64) -> Matrix {
    Matrix::filled(1, 1, v)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = self.value(x).matmul_t(self.value(w))?;
        Ok(self.push(Op::MatMulT(x, w), out))
    }

    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xr, xc) = self.shape(x);
        if self.shape(b) != (1, xc) {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} for input {:?}", self.shape(b), (xr, xc)),
            ));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for r in 0..xr {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.push(Op::AddRow(x, b), out))
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Matrix::from_vec(va.rows(), va.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(Op::Scale(x, c), out)
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(Op::Offset(x), out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), out)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), out)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(Op::Exp(x), out)
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Relu => self.relu(x),
            Activation::Tanh => self.tanh(x),
            Activation::Identity => x,
        }
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("square of a node has matching shapes")
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (n, c) = v.shape();
        let mut out = Matrix::zeros(1, c);
        for r in 0..n {
            for (o, x) in out.data_mut().iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        let inv = 1.0 / n as f64;
        out.data_mut().iter_mut().for_each(|o| *o *= inv);
        self.push(Op::MeanRows(x), out)
    }

    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let v = self.value(x);
        if v.rows() != 1 || n == 0 {
            return Err(Error::shape(
                "broadcast_rows",
                format!("need a row vector and n>0, got {:?}, n={n}", v.shape()),
            ));
        }
        let data = v.data().repeat(n);
        let out = Matrix::from_vec(n, v.cols(), data)?;
        Ok(self.push(Op::BroadcastRows(x, n), out))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(Error::shape(
                "concat_cols",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let cols = va.cols() + vb.cols();
        let mut data = Vec::with_capacity(va.rows() * cols);
        for r in 0..va.rows() {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let out = Matrix::from_vec(va.rows(), cols, data)?;
        Ok(self.push(Op::ConcatCols(a, b), out))
    }

    pub fn segment_softmax(&mut self, x: Var, segments: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if segments.iter().sum::<usize>() != v.cols() || segments.contains(&0) {
            return Err(Error::shape(
                "segment_softmax",
                format!("segments {segments:?} for {} columns", v.cols()),
            ));
        }
        let mut out = v.clone();
        for r in 0..out.rows() {
            let mut start = 0;
            for &len in segments {
                softmax_in_place(&mut out.row_mut(r)[start..start + len]);
                start += len;
            }
        }
        Ok(self.push(Op::SegmentSoftmax(x, segments.to_vec()), out))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Op::Mean(x), scalar(s))
    }

    /// Differences `v[i] - v[j]` for each `(i, j)` of a column vector.
    pub fn pair_diff(&mut self, v: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let val = self.value(v);
        if val.cols() != 1 {
            return Err(Error::shape("pair_diff", "expects a column vector"));
        }
        if pairs.is_empty() {
            return Err(Error::Empty("pair_diff"));
        }
        let n = val.rows();
        if pairs.iter().any(|&(i, j)| i >= n || j >= n) {
            return Err(Error::shape("pair_diff", format!("pair index out of range {n}")));
        }
        let d = pairs.iter().map(|&(i, j)| val.get(i, 0) - val.get(j, 0)).collect();
        let out = Matrix::column_vector(d)?;
        Ok(self.push(Op::PairDiff(v, pairs.to_vec()), out))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        if v.rows() != labels.len() || labels.iter().any(|&y| y >= v.cols()) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for logits {:?}", labels.len(), v.shape()),
            ));
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = v.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let out = scalar(total / labels.len() as f64);
        Ok(self.push(Op::SoftmaxCrossEntropy(logits, labels.to_vec()), out))
    }

    /// Fully connected layer `act(x·Wᵀ + b)` over a batch of rows.
    pub fn fc(&mut self, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
        let h = self.matmul_t(x, w)?;
        let h = self.add_row(h, b)?;
        Ok(self.activate(h, act))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.shape(output) != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", self.shape(output)),
            ));
        }
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(scalar(1.0));

        for id in (0..=output.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    adj[id] = Some(g);
                    continue;
                }
                Op::MatMulT(x, w) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let dx = accumulate(&mut adj, *x, xv);
                    gemm_nn(&g, wv, dx, 1.0);
                    let dw = accumulate(&mut adj, *w, wv);
                    gemm_tn(&g, xv, dw, 1.0);
                }
                Op::AddRow(x, b) => {
                    let db = accumulate(&mut adj, *b, self.value(*b));
                    for r in 0..g.rows() {
                        for (d, gv) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                    accumulate(&mut adj, *x, &g).axpy(1.0, &g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, &g).axpy(1.0, &g);
                    accumulate(&mut adj, *b, &g).axpy(1.0, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, &g).axpy(1.0, &g);
                    accumulate(&mut adj, *b, &g).axpy(-1.0, &g);
                }
                Op::Mul(a, b) => {
                    let ga = elementwise(&g, self.value(*b), |g, y| g * y);
                    let gb = elementwise(&g, self.value(*a), |g, x| g * x);
                    accumulate(&mut adj, *a, &g).axpy(1.0, &ga);
                    accumulate(&mut adj, *b, &g).axpy(1.0, &gb);
                }
                Op::Scale(x, c) => accumulate(&mut adj, *x, &g).axpy(*c, &g),
                Op::Offset(x) => accumulate(&mut adj, *x, &g).axpy(1.0, &g),
                Op::Relu(x) => {
                    let gx = elementwise(&g, &node.value, |g, y| if y > 0.0 { g } else { 0.0 });
                    accumulate(&mut adj, *x, &g).axpy(1.0, &gx);
                }
                Op::Tanh(x) => {
                    let gx = elementwise(&g, &node.value, |g, y| g * (1.0 - y * y));
                    accumulate(&mut adj, *x, &g).axpy(1.0, &gx);
                }
                Op::Exp(x) => {
                    let gx = elementwise(&g, &node.value, |g, y| g * y);
                    accumulate(&mut adj, *x, &g).axpy(1.0, &gx);
                }
                Op::MeanRows(x) => {
                    let xv = self.value(*x);
                    let inv = 1.0 / xv.rows() as f64;
                    let dx = accumulate(&mut adj, *x, xv);
                    for r in 0..xv.rows() {
                        for (d, gv) in dx.row_mut(r).iter_mut().zip(g.data()) {
                            *d += gv * inv;
                        }
                    }
                }
                Op::BroadcastRows(x, n) => {
                    let dx = accumulate(&mut adj, *x, self.value(*x));
                    for r in 0..*n {
                        for (d, gv) in dx.data_mut().iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let da = accumulate(&mut adj, *a, self.value(*a));
                    for r in 0..g.rows() {
                        for (d, gv) in da.row_mut(r).iter_mut().zip(&g.row(r)[..ca]) {
                            *d += gv;
                        }
                    }
                    let db = accumulate(&mut adj, *b, self.value(*b));
                    for r in 0..g.rows() {
                        for (d, gv) in db.row_mut(r).iter_mut().zip(&g.row(r)[ca..]) {
                            *d += gv;
                        }
                    }
                }
                Op::SegmentSoftmax(x, segments) => {
                    let y = &node.value;
                    let dx = accumulate(&mut adj, *x, y);
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dr = dx.row_mut(r);
                        let mut start = 0;
                        for &len in segments {
                            let seg = start..start + len;
                            let dot: f64 = yr[seg.clone()]
                                .iter()
                                .zip(&gr[seg.clone()])
                                .map(|(a, b)| a * b)
                                .sum();
                            for k in seg {
                                dr[k] += yr[k] * (gr[k] - dot);
                            }
                            start += len;
                        }
                    }
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    let dx = accumulate(&mut adj, *x, self.value(*x));
                    dx.data_mut().iter_mut().for_each(|d| *d += gv);
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let gv = g.data()[0] / xv.len() as f64;
                    let dx = accumulate(&mut adj, *x, xv);
                    dx.data_mut().iter_mut().for_each(|d| *d += gv);
                }
                Op::PairDiff(v, pairs) => {
                    let dv = accumulate(&mut adj, *v, self.value(*v));
                    for (k, &(i, j)) in pairs.iter().enumerate() {
                        let gk = g.data()[k];
                        dv.data_mut()[i] += gk;
                        dv.data_mut()[j] -= gk;
                    }
                }
                Op::SoftmaxCrossEntropy(logits, labels) => {
                    let lv = self.value(*logits);
                    let scale = g.data()[0] / labels.len() as f64;
                    let dl = accumulate(&mut adj, *logits, lv);
                    for (r, &y) in labels.iter().enumerate() {
                        let mut p = lv.row(r).to_vec();
                        softmax_in_place(&mut p);
                        p[y] -= 1.0;
                        for (d, pv) in dl.row_mut(r).iter_mut().zip(&p) {
                            *d += scale * pv;
                        }
                    }
                }
            }
        }
        Ok(Gradients { adjoints: adj })
    }
}

fn accumulate<'a>(adj: &'a mut [Option<Matrix>], v: Var, like: &Matrix) -> &'a mut Matrix {
    adj[v.0].get_or_insert_with(|| Matrix::zeros(like.rows(), like.cols()))
}

fn elementwise(g: &Matrix, y: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = g.data().iter().zip(y.data()).map(|(&a, &b)| f(a, b)).collect();
    Matrix::from_vec(g.rows(), g.cols(), data).expect("shapes already checked")
}

pub(crate) fn softmax_in_place(a: &mut [f64]) {
    let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in a.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in a.iter_mut() {
        *v /= total;
    }
}
