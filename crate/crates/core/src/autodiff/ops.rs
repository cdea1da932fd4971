use serde::{Deserialize, Serialize};

use super::{segment_softmax_corrupted, AutodiffError, Node, Var};
use crate::scalar::Scalar;
use crate::tensor::{ShapeError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceMode {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum Broadcast {
    None,
    Row,
}

pub(super) enum Op<S> {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Sub(usize, usize),
    Div(usize, usize),
    ScaleRows(usize, usize),
    Scale(usize, S),
    Offset(usize),
    LeakyRelu(usize, S),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Softplus(usize),
    SumAll(usize),
    SumColumns(usize),
    MeanColumns(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    SegmentSoftmax {
        input: usize,
        segments: Vec<usize>,
        num_segments: usize,
    },
    SegmentReduce {
        input: usize,
        segments: Vec<usize>,
        mode: ReduceMode,
        /// Max mode: source row per (segment, column), `usize::MAX` if empty.
        argmax: Vec<usize>,
        counts: Vec<usize>,
    },
    GatherRows {
        input: usize,
        idx: Vec<usize>,
    },
}

fn mismatch(op: &'static str, lhs: [usize; 2], rhs: [usize; 2]) -> AutodiffError {
    AutodiffError::Shape(ShapeError::Mismatch { op, lhs, rhs })
}

fn check_ids(op: &'static str, ids: &[usize], bound: usize) -> Result<(), AutodiffError> {
    match ids.iter().find(|&&i| i >= bound) {
        Some(&index) => Err(AutodiffError::IndexOutOfRange { op, index, bound }),
        None => Ok(()),
    }
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

fn row_broadcast<S: Scalar>(a: &Tensor<S>, row: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let cols = a.cols();
    let r = row.data();
    let data = a.data().iter().enumerate().map(|(k, &x)| f(x, r[k % cols])).collect();
    Tensor::new(a.rows(), cols, data).expect("same shape")
}

fn column_sums<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, &x) in out.data_mut().iter_mut().zip(t.row_slice(r)) {
            *o = *o + x;
        }
    }
    out
}

pub(super) fn stable_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn stable_softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

fn softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
    let mut total = S::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

/// Forward kernel of the per-segment, per-column softmax.
pub(crate) fn segment_softmax_forward<S: Scalar>(x: &Tensor<S>, segments: &[usize], num_segments: usize) -> Tensor<S> {
    let h = x.cols();
    let mut max = vec![S::neg_infinity(); num_segments * h];
    for (e, &s) in segments.iter().enumerate() {
        for (k, &v) in x.row_slice(e).iter().enumerate() {
            let m = &mut max[s * h + k];
            *m = m.max(v);
        }
    }
    let mut out = Tensor::zeros(x.rows(), h);
    let mut total = vec![S::zero(); num_segments * h];
    for (e, &s) in segments.iter().enumerate() {
        for k in 0..h {
            let v = (x.get(e, k) - max[s * h + k]).exp();
            out.set(e, k, v);
            total[s * h + k] = total[s * h + k] + v;
        }
    }
    let corrupt = segment_softmax_corrupted();
    for (e, &s) in segments.iter().enumerate() {
        for k in 0..h {
            let mut v = out.get(e, k) / total[s * h + k];
            if corrupt {
                v = v * S::lit(1.01);
            }
            out.set(e, k, v);
        }
    }
    out
}

impl<'t, S: Scalar> Var<'t, S> {
    fn unary(&self, value: Tensor<S>, op: Op<S>) -> Var<'t, S> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: Var<'t, S>, value: Tensor<S>, op: Op<S>) -> Var<'t, S> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn matmul(&self, other: Var<'t, S>) -> Result<Var<'t, S>, AutodiffError> {
        let out = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.id].value.matmul(&inner.nodes[other.id].value)?
        };
        Ok(self.binary(other, out, Op::MatMul(self.id, other.id)))
    }

    /// `x · W + b` with `b` a broadcast row.
    pub fn affine(&self, weight: Var<'t, S>, bias: Var<'t, S>) -> Result<Var<'t, S>, AutodiffError> {
        self.matmul(weight)?.add(bias)
    }

    fn broadcast_kind(&self, other: Var<'t, S>, op: &'static str) -> Result<Broadcast, AutodiffError> {
        let (a, b) = (self.shape(), other.shape());
        if a == b {
            Ok(Broadcast::None)
        } else if b[0] == 1 && b[1] == a[1] {
            Ok(Broadcast::Row)
        } else {
            Err(mismatch(op, a, b))
        }
    }

    /// Elementwise sum; `other` may be a `1 × D` row broadcast over rows.
    pub fn add(&self, other: Var<'t, S>) -> Result<Var<'t, S>, AutodiffError> {
        let kind = self.broadcast_kind(other, "add")?;
        let out = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id].value, &inner.nodes[other.id].value);
            match kind {
                Broadcast::None => zip_map(a, b, |x, y| x + y),
                Broadcast::Row => row_broadcast(a, b, |x, y| x + y),
            }
        };
        Ok(self.binary(other, out, Op::Add(self.id, other.id, kind)))
    }

    /// Elementwise product; `other` may be a `1 × D` row broadcast over rows.
    pub fn mul(&self, other: Var<'t, S>) -> Result<Var<'t, S>, AutodiffError> {
        let kind = self.broadcast_kind(other, "mul")?;
        let out = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id].value, &inner.nodes[other.id].value);
            match kind {
                Broadcast::None => zip_map(a, b, |x, y| x * y),
                Broadcast::Row => row_broadcast(a, b, |x, y| x * y),
            }
        };
        Ok(self.binary(other, out, Op::Mul(self.id, other.id, kind)))
    }

    pub fn sub(&self, other: Var<'t, S>) -> Result<Var<'t, S>, AutodiffError> {
        if self.shape() != other.shape() {
            return Err(mismatch("sub", self.shape(), other.shape()));
        }
        let out = {
            let inner = self.tape.inner.borrow();
            zip_map(&inner.nodes[self.id].value, &inner.nodes[other.id].value, |x, y| x - y)
        };
        Ok(self.binary(other, out, Op::Sub(self.id, other.id)))
    }

    pub fn div(&self, other: Var<'t, S>) -> Result<Var<'t, S>, AutodiffError> {
        if self.shape() != other.shape() {
            return Err(mismatch("div", self.shape(), other.shape()));
        }
        let out = {
            let inner = self.tape.inner.borrow();
            zip_map(&inner.nodes[self.id].value, &inner.nodes[other.id].value, |x, y| x / y)
        };
        Ok(self.binary(other, out, Op::Div(self.id, other.id)))
    }

    /// Multiplies row `e` by `column[e]`; `column` is `E × 1`.
    pub fn scale_rows(&self, column: Var<'t, S>) -> Result<Var<'t, S>, AutodiffError> {
        let (a, c) = (self.shape(), column.shape());
        if c != [a[0], 1] {
            return Err(mismatch("scale_rows", a, c));
        }
        let out = {
            let inner = self.tape.inner.borrow();
            let (m, col) = (&inner.nodes[self.id].value, &inner.nodes[column.id].value);
            let cols = m.cols();
            let data = m
                .data()
                .iter()
                .enumerate()
                .map(|(k, &x)| x * col.data()[k / cols.max(1)])
                .collect();
            Tensor::new(m.rows(), cols, data).expect("same shape")
        };
        Ok(self.binary(column, out, Op::ScaleRows(self.id, column.id)))
    }

    /// Multiplication by a constant.
    pub fn scale(&self, factor: S) -> Var<'t, S> {
        let out = self.tape.with_value(self.id, |t| t.map(|x| x * factor));
        self.unary(out, Op::Scale(self.id, factor))
    }

    /// Addition of a constant to every entry.
    pub fn offset(&self, c: S) -> Var<'t, S> {
        let out = self.tape.with_value(self.id, |t| t.map(|x| x + c));
        self.unary(out, Op::Offset(self.id))
    }

    pub fn leaky_relu(&self, slope: S) -> Result<Var<'t, S>, AutodiffError> {
        if slope < S::zero() {
            return Err(AutodiffError::NegativeSlope(slope.to_f64_lossy()));
        }
        let out = self
            .tape
            .with_value(self.id, |t| t.map(|x| if x > S::zero() { x } else { slope * x }));
        Ok(self.unary(out, Op::LeakyRelu(self.id, slope)))
    }

    pub fn relu(&self) -> Var<'t, S> {
        self.leaky_relu(S::zero()).expect("zero slope is valid")
    }

    pub fn exp(&self) -> Var<'t, S> {
        let out = self.tape.with_value(self.id, |t| t.map(S::exp));
        self.unary(out, Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<'t, S>, AutodiffError> {
        let out = self.tape.with_value(self.id, |t| {
            match t.data().iter().find(|&&x| x <= S::zero() || x.is_nan()) {
                Some(&bad) => Err(AutodiffError::NonPositiveLog(bad.to_f64_lossy())),
                None => Ok(t.map(S::ln)),
            }
        })?;
        Ok(self.unary(out, Op::Log(self.id)))
    }

    pub fn sigmoid(&self) -> Var<'t, S> {
        let out = self.tape.with_value(self.id, |t| t.map(stable_sigmoid));
        self.unary(out, Op::Sigmoid(self.id))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Var<'t, S> {
        let out = self.tape.with_value(self.id, |t| t.map(stable_softplus));
        self.unary(out, Op::Softplus(self.id))
    }

    pub fn sum_all(&self) -> Var<'t, S> {
        let out = self.tape.with_value(self.id, |t| Tensor::scalar(t.sum()));
        self.unary(out, Op::SumAll(self.id))
    }

    /// Row sums: `E × D → E × 1`.
    pub fn sum_over_columns(&self) -> Var<'t, S> {
        let out = self.tape.with_value(self.id, |t| {
            let sums: Vec<S> = (0..t.rows())
                .map(|r| t.row_slice(r).iter().fold(S::zero(), |a, &b| a + b))
                .collect();
            Tensor::column(&sums)
        });
        self.unary(out, Op::SumColumns(self.id))
    }

    /// Row means: `E × D → E × 1`.
    pub fn mean_over_columns(&self) -> Var<'t, S> {
        let out = self.tape.with_value(self.id, |t| {
            let d = S::from_usize_lossy(t.cols());
            let means: Vec<S> = (0..t.rows())
                .map(|r| t.row_slice(r).iter().fold(S::zero(), |a, &b| a + b) / d)
                .collect();
            Tensor::column(&means)
        });
        self.unary(out, Op::MeanColumns(self.id))
    }

    /// Softmax across the columns of each row.
    pub fn softmax_rows(&self) -> Var<'t, S> {
        let out = self.tape.with_value(self.id, |t| {
            let mut out = Tensor::zeros(t.rows(), t.cols());
            for r in 0..t.rows() {
                softmax_row(t.row_slice(r), out.row_slice_mut(r));
            }
            out
        });
        self.unary(out, Op::SoftmaxRows(self.id))
    }

    pub fn log_softmax_rows(&self) -> Var<'t, S> {
        let out = self.tape.with_value(self.id, |t| {
            let mut out = Tensor::zeros(t.rows(), t.cols());
            for r in 0..t.rows() {
                let row = t.row_slice(r);
                let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
                let lse = row.iter().fold(S::zero(), |a, &x| a + (x - max).exp()).ln() + max;
                for (o, &x) in out.row_slice_mut(r).iter_mut().zip(row) {
                    *o = x - lse;
                }
            }
            out
        });
        self.unary(out, Op::LogSoftmaxRows(self.id))
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    pub fn segment_softmax(&self, segments: &[usize], num_segments: usize) -> Result<Var<'t, S>, AutodiffError> {
        let rows = self.shape()[0];
        if segments.len() != rows {
            return Err(AutodiffError::LengthMismatch {
                op: "segment_softmax",
                expected: rows,
                found: segments.len(),
            });
        }
        check_ids("segment_softmax", segments, num_segments)?;
        let out = self
            .tape
            .with_value(self.id, |t| segment_softmax_forward(t, segments, num_segments));
        Ok(self.unary(
            out,
            Op::SegmentSoftmax {
                input: self.id,
                segments: segments.to_vec(),
                num_segments,
            },
        ))
    }

    /// Reduces rows sharing a segment id into one output row per segment.
    /// Empty segments produce a zero row.
    pub fn segment_reduce(
        &self,
        segments: &[usize],
        num_segments: usize,
        mode: ReduceMode,
    ) -> Result<Var<'t, S>, AutodiffError> {
        let [rows, d] = self.shape();
        if segments.len() != rows {
            return Err(AutodiffError::LengthMismatch {
                op: "segment_reduce",
                expected: rows,
                found: segments.len(),
            });
        }
        check_ids("segment_reduce", segments, num_segments)?;
        let mut counts = vec![0usize; num_segments];
        for &s in segments {
            counts[s] += 1;
        }
        let mut argmax = Vec::new();
        let out = self.tape.with_value(self.id, |t| {
            let mut out = Tensor::zeros(num_segments, d);
            match mode {
                ReduceMode::Sum | ReduceMode::Mean => {
                    for (e, &s) in segments.iter().enumerate() {
                        for (o, &x) in out.row_slice_mut(s).iter_mut().zip(t.row_slice(e)) {
                            *o = *o + x;
                        }
                    }
                    if mode == ReduceMode::Mean {
                        for (s, &n) in counts.iter().enumerate() {
                            if n > 0 {
                                let n = S::from_usize_lossy(n);
                                for o in out.row_slice_mut(s) {
                                    *o = *o / n;
                                }
                            }
                        }
                    }
                }
                ReduceMode::Max => {
                    argmax = vec![usize::MAX; num_segments * d];
                    for (e, &s) in segments.iter().enumerate() {
                        for k in 0..d {
                            let slot = &mut argmax[s * d + k];
                            // strict comparison keeps the first occurrence on ties
                            if *slot == usize::MAX || t.get(e, k) > t.get(*slot, k) {
                                *slot = e;
                            }
                        }
                    }
                    for s in 0..num_segments {
                        for k in 0..d {
                            let src = argmax[s * d + k];
                            if src != usize::MAX {
                                out.set(s, k, t.get(src, k));
                            }
                        }
                    }
                }
            }
            out
        });
        Ok(self.unary(
            out,
            Op::SegmentReduce {
                input: self.id,
                segments: segments.to_vec(),
                mode,
                argmax,
                counts,
            },
        ))
    }

    /// Copies the rows listed in `idx`; gradients scatter-add back.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t, S>, AutodiffError> {
        let rows = self.shape()[0];
        check_ids("gather_rows", idx, rows)?;
        let out = self.tape.with_value(self.id, |t| t.select_rows(idx));
        Ok(self.unary(
            out,
            Op::GatherRows {
                input: self.id,
                idx: idx.to_vec(),
            },
        ))
    }
}

/// Applies the backward rule of node `id`, handing each input's gradient
/// contribution to `emit`.
pub(super) fn backward<S: Scalar>(nodes: &[Node<S>], id: usize, g: &Tensor<S>, emit: &mut dyn FnMut(usize, Tensor<S>)) {
    let val = |i: usize| &nodes[i].value;
    let rg = |i: usize| nodes[i].requires_grad;
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul(a, b) => {
            if rg(*a) {
                emit(*a, g.matmul(&val(*b).transpose()).expect("matmul grad"));
            }
            if rg(*b) {
                emit(*b, val(*a).transpose().matmul(g).expect("matmul grad"));
            }
        }
        Op::Add(a, b, kind) => {
            if rg(*a) {
                emit(*a, g.clone());
            }
            if rg(*b) {
                match kind {
                    Broadcast::None => emit(*b, g.clone()),
                    Broadcast::Row => emit(*b, column_sums(g)),
                }
            }
        }
        Op::Mul(a, b, kind) => {
            let (av, bv) = (val(*a), val(*b));
            match kind {
                Broadcast::None => {
                    if rg(*a) {
                        emit(*a, zip_map(g, bv, |x, y| x * y));
                    }
                    if rg(*b) {
                        emit(*b, zip_map(g, av, |x, y| x * y));
                    }
                }
                Broadcast::Row => {
                    if rg(*a) {
                        emit(*a, row_broadcast(g, bv, |x, y| x * y));
                    }
                    if rg(*b) {
                        emit(*b, column_sums(&zip_map(g, av, |x, y| x * y)));
                    }
                }
            }
        }
        Op::Sub(a, b) => {
            if rg(*a) {
                emit(*a, g.clone());
            }
            if rg(*b) {
                emit(*b, g.map(|x| -x));
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if rg(*a) {
                emit(*a, zip_map(g, bv, |x, y| x / y));
            }
            if rg(*b) {
                let ga = zip_map(g, av, |x, y| x * y);
                emit(*b, zip_map(&ga, bv, |x, y| -x / (y * y)));
            }
        }
        Op::ScaleRows(a, c) => {
            let (av, cv) = (val(*a), val(*c));
            let cols = av.cols();
            if rg(*a) {
                let data = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, &x)| x * cv.data()[k / cols.max(1)])
                    .collect();
                emit(*a, Tensor::new(av.rows(), cols, data).expect("shape"));
            }
            if rg(*c) {
                let sums: Vec<S> = (0..av.rows())
                    .map(|r| {
                        g.row_slice(r)
                            .iter()
                            .zip(av.row_slice(r))
                            .fold(S::zero(), |acc, (&x, &y)| acc + x * y)
                    })
                    .collect();
                emit(*c, Tensor::column(&sums));
            }
        }
        Op::Scale(a, f) => emit(*a, g.map(|x| x * *f)),
        Op::Offset(a) => emit(*a, g.clone()),
        Op::LeakyRelu(a, slope) => {
            // subgradient 1 at the kink
            let d = val(*a).map(|x| if x >= S::zero() { S::one() } else { *slope });
            emit(*a, zip_map(g, &d, |x, y| x * y));
        }
        Op::Exp(a) => emit(*a, zip_map(g, out, |x, y| x * y)),
        Op::Log(a) => emit(*a, zip_map(g, val(*a), |x, y| x / y)),
        Op::Sigmoid(a) => emit(*a, zip_map(g, out, |x, y| x * y * (S::one() - y))),
        Op::Softplus(a) => emit(*a, zip_map(g, val(*a), |x, y| x * stable_sigmoid(y))),
        Op::SumAll(a) => {
            let [r, c] = val(*a).shape();
            emit(*a, Tensor::full(r, c, g.item()));
        }
        Op::SumColumns(a) | Op::MeanColumns(a) => {
            let [r, c] = val(*a).shape();
            let scale = if matches!(nodes[id].op, Op::MeanColumns(_)) {
                S::one() / S::from_usize_lossy(c)
            } else {
                S::one()
            };
            let mut d = Tensor::zeros(r, c);
            for row in 0..r {
                let v = g.get(row, 0) * scale;
                d.row_slice_mut(row).iter_mut().for_each(|x| *x = v);
            }
            emit(*a, d);
        }
        Op::SoftmaxRows(a) => {
            let mut d = Tensor::zeros(out.rows(), out.cols());
            for r in 0..out.rows() {
                let (y, gr) = (out.row_slice(r), g.row_slice(r));
                let dot = y.iter().zip(gr).fold(S::zero(), |acc, (&p, &q)| acc + p * q);
                for ((o, &p), &q) in d.row_slice_mut(r).iter_mut().zip(y).zip(gr) {
                    *o = p * (q - dot);
                }
            }
            emit(*a, d);
        }
        Op::LogSoftmaxRows(a) => {
            let mut d = Tensor::zeros(out.rows(), out.cols());
            for r in 0..out.rows() {
                let (y, gr) = (out.row_slice(r), g.row_slice(r));
                let total = gr.iter().fold(S::zero(), |acc, &q| acc + q);
                for ((o, &ly), &q) in d.row_slice_mut(r).iter_mut().zip(y).zip(gr) {
                    *o = q - ly.exp() * total;
                }
            }
            emit(*a, d);
        }
        Op::SegmentSoftmax {
            input,
            segments,
            num_segments,
        } => {
            let h = out.cols();
            let mut dots = vec![S::zero(); num_segments * h];
            for (e, &s) in segments.iter().enumerate() {
                for k in 0..h {
                    dots[s * h + k] = dots[s * h + k] + g.get(e, k) * out.get(e, k);
                }
            }
            let mut d = Tensor::zeros(out.rows(), h);
            for (e, &s) in segments.iter().enumerate() {
                for k in 0..h {
                    d.set(e, k, out.get(e, k) * (g.get(e, k) - dots[s * h + k]));
                }
            }
            emit(*input, d);
        }
        Op::SegmentReduce {
            input,
            segments,
            mode,
            argmax,
            counts,
        } => {
            let [rows, cols] = val(*input).shape();
            let mut d = Tensor::zeros(rows, cols);
            match mode {
                ReduceMode::Sum => {
                    for (e, &s) in segments.iter().enumerate() {
                        d.row_slice_mut(e).copy_from_slice(g.row_slice(s));
                    }
                }
                ReduceMode::Mean => {
                    for (e, &s) in segments.iter().enumerate() {
                        let n = S::from_usize_lossy(counts[s]);
                        for (o, &x) in d.row_slice_mut(e).iter_mut().zip(g.row_slice(s)) {
                            *o = x / n;
                        }
                    }
                }
                ReduceMode::Max => {
                    for (slot, &src) in argmax.iter().enumerate() {
                        if src != usize::MAX {
                            let (s, k) = (slot / cols, slot % cols);
                            d.set(src, k, d.get(src, k) + g.get(s, k));
                        }
                    }
                }
            }
            emit(*input, d);
        }
        Op::GatherRows { input, idx } => {
            let [rows, cols] = val(*input).shape();
            let mut d = Tensor::zeros(rows, cols);
            for (e, &src) in idx.iter().enumerate() {
                for (o, &x) in d.row_slice_mut(src).iter_mut().zip(g.row_slice(e)) {
                    *o = *o + x;
                }
            }
            emit(*input, d);
        }
    }
}
