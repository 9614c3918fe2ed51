//! Tape-based reverse-mode differentiation over dense [`Tensor`]s.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`];
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients.
//! Nodes are only ever appended, so the tape is topologically ordered by
//! construction. The op set is exactly what the scoring model needs: dense
//! products, elementwise arithmetic, LeakyReLU, and the gather / scatter /
//! segment reductions that implement message passing over an edge list.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    LeakyRelu(Var, f64),
    SegmentSoftmax(Var, Vec<usize>),
    SegmentMean {
        input: Var,
        segments: Vec<usize>,
        counts: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    MulRows(Var, Var),
    Mse(Var, Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass. Single-threaded; build one tape
/// per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` took part in the loss
    /// and requires gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but zero-filled when `v` did not reach the
    /// loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

fn require_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(format!("{what}: expected a matrix, got shape {s:?}"))),
    }
}

/// `a (p x q) * b (q x r)`.
fn matmul_raw(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        let row = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (o, &bkj) in row.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Segment sizes for `segments` over `num_segments` groups; every group must
/// be non-empty.
fn segment_counts(segments: &[usize], num_segments: usize, what: &str) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; num_segments];
    for &s in segments {
        if s >= num_segments {
            return Err(Error::shape(format!(
                "{what}: segment id {s} out of range for {num_segments} segments"
            )));
        }
        counts[s] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::shape(format!("{what}: segment {empty} is empty")));
    }
    Ok(counts)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = require_matrix(self.value(a), "matmul lhs")?;
        let (q2, r) = require_matrix(self.value(b), "matmul rhs")?;
        if q != q2 {
            return Err(Error::shape(format!(
                "matmul {p}x{q} by {q2}x{r}: inner dimensions differ"
            )));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), p, q, r);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(p, r, data)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = require_matrix(self.value(a), "transpose")?;
        let data = transpose_raw(self.value(a).data(), r, c);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(c, r, data)?, Op::Transpose(a), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Adds a length-`d` bias to every row of an `N x d` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = require_matrix(self.value(x), "add_bias")?;
        if self.value(bias).len() != d {
            return Err(Error::shape(format!(
                "add_bias: bias of {} values for {d} columns",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::matrix(n, d, data)?, Op::AddBias(x, bias), rg))
    }

    /// Elementwise `max(x, slope * x)`; the derivative at 0 is `slope`.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| leaky(v, slope)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::LeakyRelu(x, slope), rg)
    }

    /// Softmax taken separately within each segment of a flat vector of
    /// logits. `segment_of[e]` names the segment of entry `e`; every segment
    /// in `0..num_segments` must be non-empty.
    pub fn segment_softmax(
        &mut self,
        logits: Var,
        segment_of: &[usize],
        num_segments: usize,
    ) -> Result<Var> {
        let t = self.value(logits);
        if t.len() != segment_of.len() {
            return Err(Error::shape(format!(
                "segment_softmax: {} logits but {} segment ids",
                t.len(),
                segment_of.len()
            )));
        }
        segment_counts(segment_of, num_segments, "segment_softmax")?;
        let mut max = vec![f64::NEG_INFINITY; num_segments];
        for (&l, &s) in t.data().iter().zip(segment_of) {
            max[s] = max[s].max(l);
        }
        let exps: Vec<f64> = t
            .data()
            .iter()
            .zip(segment_of)
            .map(|(&l, &s)| (l - max[s]).exp())
            .collect();
        let mut denom = vec![0.0; num_segments];
        for (&e, &s) in exps.iter().zip(segment_of) {
            denom[s] += e;
        }
        let data = exps
            .iter()
            .zip(segment_of)
            .map(|(&e, &s)| e / denom[s])
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(value, Op::SegmentSoftmax(logits, segment_of.to_vec()), rg))
    }

    /// Row-wise mean within each segment: `N x d` to `S x d`.
    pub fn segment_mean(
        &mut self,
        x: Var,
        segment_of: &[usize],
        num_segments: usize,
    ) -> Result<Var> {
        let (n, d) = require_matrix(self.value(x), "segment_mean")?;
        if n != segment_of.len() {
            return Err(Error::shape(format!(
                "segment_mean: {n} rows but {} segment ids",
                segment_of.len()
            )));
        }
        let counts = segment_counts(segment_of, num_segments, "segment_mean")?;
        let mut out = vec![0.0; num_segments * d];
        for (row, &s) in self.value(x).data().chunks_exact(d).zip(segment_of) {
            for (o, v) in out[s * d..(s + 1) * d].iter_mut().zip(row) {
                *o += v;
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            for o in &mut out[s * d..(s + 1) * d] {
                *o /= c as f64;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(num_segments, d, out)?,
            Op::SegmentMean {
                input: x,
                segments: segment_of.to_vec(),
                counts,
            },
            rg,
        ))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols: nothing to concatenate"));
        }
        let mut widths = Vec::with_capacity(parts.len());
        let mut rows = None;
        for &p in parts {
            let (r, c) = require_matrix(self.value(p), "concat_cols")?;
            if *rows.get_or_insert(r) != r {
                return Err(Error::shape("concat_cols: row counts differ"));
            }
            widths.push(c);
        }
        let rows = rows.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::matrix(rows, total, data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// `out[e] = x[index[e]]` for each entry of `index`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (n, d) = require_matrix(self.value(x), "gather_rows")?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index {
            if i >= n {
                return Err(Error::shape(format!("gather_rows: row {i} of {n}")));
            }
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(index.len(), d, data)?,
            Op::GatherRows(x, index.to_vec()),
            rg,
        ))
    }

    /// `out[index[e]] += x[e]`, producing `num_rows` rows.
    pub fn scatter_add_rows(&mut self, x: Var, index: &[usize], num_rows: usize) -> Result<Var> {
        let (e, d) = require_matrix(self.value(x), "scatter_add_rows")?;
        if e != index.len() {
            return Err(Error::shape(format!(
                "scatter_add_rows: {e} rows but {} targets",
                index.len()
            )));
        }
        let mut out = vec![0.0; num_rows * d];
        for (row, &t) in self.value(x).data().chunks_exact(d).zip(index) {
            if t >= num_rows {
                return Err(Error::shape(format!(
                    "scatter_add_rows: target {t} of {num_rows}"
                )));
            }
            for (o, v) in out[t * d..(t + 1) * d].iter_mut().zip(row) {
                *o += v;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(num_rows, d, out)?,
            Op::ScatterAddRows(x, index.to_vec()),
            rg,
        ))
    }

    /// Multiplies row `e` of an `E x d` matrix by `weights[e]`.
    pub fn mul_rows(&mut self, x: Var, weights: Var) -> Result<Var> {
        let (e, d) = require_matrix(self.value(x), "mul_rows")?;
        if self.value(weights).len() != e {
            return Err(Error::shape(format!(
                "mul_rows: {} weights for {e} rows",
                self.value(weights).len()
            )));
        }
        let w = self.value(weights).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(d)
            .zip(w)
            .flat_map(|(row, &wi)| row.iter().map(move |v| v * wi))
            .collect();
        let rg = self.rg(&[x, weights]);
        Ok(self.push(Tensor::matrix(e, d, data)?, Op::MulRows(x, weights), rg))
    }

    /// Mean squared difference over all entries; a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        let a = self.value(pred).data();
        let b = self.value(target).data();
        if a.is_empty() {
            return Err(Error::shape("mse of empty tensors"));
        }
        let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(sum / a.len() as f64);
        let rg = self.rg(&[pred, target]);
        Ok(self.push(value, Op::Mse(pred, target), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad).map(|data| {
                    Tensor::new(node.value.shape().to_vec(), data).expect("gradient sized as value")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let input = &self.nodes[v.0];
            if !input.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; input.value.len()]);
            f(buf);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (p, q) = (av.shape()[0], av.shape()[1]);
                let r = bv.shape()[1];
                acc(*a, &mut |buf| {
                    let bt = transpose_raw(bv.data(), q, r);
                    let ga = matmul_raw(g, &bt, p, r, q);
                    buf.iter_mut().zip(ga).for_each(|(o, v)| *o += v);
                });
                acc(*b, &mut |buf| {
                    let at = transpose_raw(av.data(), p, q);
                    let gb = matmul_raw(&at, g, q, p, r);
                    buf.iter_mut().zip(gb).for_each(|(o, v)| *o += v);
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                acc(*a, &mut |buf| {
                    let gt = transpose_raw(g, r, c);
                    buf.iter_mut().zip(gt).for_each(|(o, v)| *o += v);
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o += v));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Scale(a, factor) => {
                acc(*a, &mut |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, v)| *o += factor * v)
                });
            }
            Op::AddBias(x, bias) => {
                let d = node.value.cols();
                acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                acc(*bias, &mut |buf| {
                    for row in g.chunks_exact(d) {
                        buf.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |buf| {
                    for ((o, &gi), &xi) in buf.iter_mut().zip(g).zip(xv) {
                        *o += if xi > 0.0 { gi } else { slope * gi };
                    }
                });
            }
            Op::SegmentSoftmax(x, segments) => {
                let y = node.value.data();
                let num = segments.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; num];
                for ((&gi, &yi), &s) in g.iter().zip(y).zip(segments) {
                    dot[s] += gi * yi;
                }
                acc(*x, &mut |buf| {
                    for (((o, &gi), &yi), &s) in buf.iter_mut().zip(g).zip(y).zip(segments) {
                        *o += yi * (gi - dot[s]);
                    }
                });
            }
            Op::SegmentMean {
                input,
                segments,
                counts,
            } => {
                let d = node.value.cols();
                acc(*input, &mut |buf| {
                    for (row, &s) in buf.chunks_exact_mut(d).zip(segments) {
                        let c = counts[s] as f64;
                        for (o, v) in row.iter_mut().zip(&g[s * d..(s + 1) * d]) {
                            *o += v / c;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &mut |buf| {
                        for i in 0..rows {
                            let src = &g[i * total + start..i * total + start + w];
                            buf[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(o, v)| *o += v);
                        }
                    });
                    start += w;
                }
            }
            Op::GatherRows(x, index) => {
                let d = node.value.cols();
                acc(*x, &mut |buf| {
                    for (row, &i) in g.chunks_exact(d).zip(index) {
                        buf[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(o, v)| *o += v);
                    }
                });
            }
            Op::ScatterAddRows(x, index) => {
                let d = node.value.cols();
                acc(*x, &mut |buf| {
                    for (row, &t) in buf.chunks_exact_mut(d).zip(index) {
                        row.iter_mut()
                            .zip(&g[t * d..(t + 1) * d])
                            .for_each(|(o, v)| *o += v);
                    }
                });
            }
            Op::MulRows(x, weights) => {
                let d = node.value.cols();
                let xv = self.value(*x).data();
                let wv = self.value(*weights).data();
                acc(*x, &mut |buf| {
                    for ((row, grow), &w) in buf.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(wv) {
                        row.iter_mut().zip(grow).for_each(|(o, v)| *o += w * v);
                    }
                });
                acc(*weights, &mut |buf| {
                    for ((o, grow), xrow) in buf.iter_mut().zip(g.chunks_exact(d)).zip(xv.chunks_exact(d)) {
                        *o += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::Mse(pred, target) => {
                let a = self.value(*pred).data();
                let b = self.value(*target).data();
                let k = 2.0 * g[0] / a.len() as f64;
                acc(*pred, &mut |buf| {
                    for ((o, x), y) in buf.iter_mut().zip(a).zip(b) {
                        *o += k * (x - y);
                    }
                });
                acc(*target, &mut |buf| {
                    for ((o, x), y) in buf.iter_mut().zip(a).zip(b) {
                        *o -= k * (x - y);
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0]));
            }
        }
    }
}

/// Per-tensor result of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

/// Default central-difference step.
pub const FD_EPS: f64 = 1e-5;

/// Relative error `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

/// Compares analytic gradients against central differences of `f`.
///
/// `params` are `(name, value)` pairs, `analytic[i]` the gradient of `f` at
/// `params` with respect to `params[i]`. Every coordinate is checked.
pub fn finite_diff_check<F>(
    f: F,
    params: &[(String, Tensor)],
    analytic: &[Tensor],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::arg("one analytic gradient per parameter required"));
    }
    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut entries = Vec::with_capacity(params.len());
    for (pi, (name, _)) in params.iter().enumerate() {
        if analytic[pi].len() != values[pi].len() {
            return Err(Error::shape(format!("gradient for {name} has the wrong size")));
        }
        let mut worst: f64 = 0.0;
        for c in 0..values[pi].len() {
            let orig = values[pi].data()[c];
            values[pi].data_mut()[c] = orig + eps;
            let plus = f(&values)?;
            values[pi].data_mut()[c] = orig - eps;
            let minus = f(&values)?;
            values[pi].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[pi].data()[c], numeric));
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            coords: values[pi].len(),
            max_rel_err: worst,
        });
    }
    Ok(GradCheckReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Builds `loss = build(tape, leaves)` and checks its gradient against
    /// finite differences.
    fn check<B>(inputs: Vec<Tensor>, build: B) -> f64
    where
        B: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(&inputs)
            .map(|(v, t)| grads.get_or_zeros(*v, t.shape()))
            .collect();
        let named: Vec<(String, Tensor)> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("p{i}"), t.clone()))
            .collect();
        let f = |vals: &[Tensor]| -> Result<f64> {
            let mut t = Tape::new();
            let vs: Vec<Var> = vals.iter().map(|v| t.leaf(v.clone())).collect();
            let l = build(&mut t, &vs)?;
            Ok(t.value(l).data()[0])
        };
        finite_diff_check(f, &named, &analytic, FD_EPS)
            .unwrap()
            .max_rel_err()
    }

    /// Weighted sum so that every output coordinate gets a distinct upstream
    /// gradient.
    fn weighted_sum(tape: &mut Tape, x: Var) -> Result<Var> {
        let t = tape.value(x).clone();
        let w: Vec<f64> = (0..t.len()).map(|i| 0.3 + 0.17 * i as f64).collect();
        let wv = tape.constant(Tensor::new(t.shape().to_vec(), w)?);
        let zero = tape.constant(Tensor::zeros(t.shape().to_vec()));
        let shifted = tape.sub(x, zero)?;
        let diff = tape.add(shifted, wv)?;
        // mse(x + w, w) = mean(x^2); combine with a linear term via sum.
        let sq = tape.mse(diff, wv)?;
        let lin = tape.sum(x);
        let lin = tape.scale(lin, 0.1);
        tape.add(sq, lin)
    }

    #[test]
    fn matmul_values() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 4.0]);

        let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0]);
        assert!(t.matmul(b, b).is_err());
    }

    #[test]
    fn matmul_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 3]);
        let b = rand_tensor(&mut rng, &[3, 3]);
        let err = check(vec![a, b], |t, v| {
            let c = t.matmul(v[0], v[1])?;
            Ok(t.sum(c))
        });
        assert!(err <= 1e-6, "{err}");
        let err = check(
            vec![rand_tensor(&mut rng, &[2, 4]), rand_tensor(&mut rng, &[4, 3])],
            |t, v| {
                let c = t.matmul(v[0], v[1])?;
                weighted_sum(t, c)
            },
        );
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn leaky_relu_values_and_grad() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-1.0, 2.0]));
        let y = t.leaky_relu(x, 0.01);
        assert_eq!(t.value(y).data(), &[-0.01, 2.0]);
        let z = t.constant(Tensor::vector(vec![0.0]));
        let y = t.leaky_relu(z, 0.2);
        assert_eq!(t.value(y).data(), &[0.0]);

        // derivative at exactly zero is the slope
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0]));
        let y = t.leaky_relu(x, 0.2);
        let l = t.sum(y);
        assert_eq!(t.backward(l).unwrap().get(x).unwrap().data(), &[0.2]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[2, 5]);
        assert!(x.data().iter().all(|v| v.abs() > 1e-3));
        let err = check(vec![x], |t, v| {
            let y = t.leaky_relu(v[0], 0.2);
            weighted_sum(t, y)
        });
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn segment_softmax_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = t.segment_softmax(x, &[0, 0], 1).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);

        let x = t.constant(Tensor::vector(vec![7.3]));
        let y = t.segment_softmax(x, &[0], 1).unwrap();
        assert_eq!(t.value(y).data(), &[1.0]);

        let x = t.constant(Tensor::vector(vec![1f64.ln(), 3f64.ln()]));
        let y = t.segment_softmax(x, &[0, 0], 1).unwrap();
        assert!((t.value(y).data()[0] - 0.25).abs() < 1e-15);
        assert!((t.value(y).data()[1] - 0.75).abs() < 1e-15);

        // huge logits stay finite
        let x = t.constant(Tensor::vector(vec![1000.0, 1000.0, -5.0]));
        let y = t.segment_softmax(x, &[0, 0, 1], 2).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5, 1.0]);

        let x = t.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(t.segment_softmax(x, &[0, 2], 3).is_err());
    }

    #[test]
    fn segment_softmax_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[7, 1]);
        let seg = [0, 0, 1, 2, 2, 2, 1];
        let err = check(vec![x], |t, v| {
            let y = t.segment_softmax(v[0], &seg, 3)?;
            weighted_sum(t, y)
        });
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn segment_mean_values_and_grad() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![1.0, 3.0], vec![3.0, 1.0]]).unwrap());
        let m = t.segment_mean(x, &[0, 0], 1).unwrap();
        assert_eq!(t.value(m).data(), &[2.0, 2.0]);
        let l = t.sum(m);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.5; 4]);

        let mut t = Tape::new();
        let rows = Tensor::from_rows(&[vec![1.0, 2.0], vec![5.0, 6.0]]).unwrap();
        let x = t.constant(rows.clone());
        let m = t.segment_mean(x, &[0, 1], 2).unwrap();
        assert_eq!(t.value(m), &rows);
        assert!(t.segment_mean(x, &[0, 0], 2).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let err = check(vec![rand_tensor(&mut rng, &[5, 3])], |t, v| {
            let m = t.segment_mean(v[0], &[0, 1, 1, 0, 1], 2)?;
            weighted_sum(t, m)
        });
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn gather_scatter_concat_mulrows_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[4, 3]);
        let w = rand_tensor(&mut rng, &[6, 1]);
        let y = rand_tensor(&mut rng, &[6, 2]);
        let err = check(vec![x, w, y], |t, v| {
            let src = [0, 1, 1, 2, 3, 3];
            let dst = [1, 0, 2, 1, 3, 0];
            let gs = t.gather_rows(v[0], &src)?;
            let gd = t.gather_rows(v[0], &dst)?;
            let cat = t.concat_cols(&[gd, gs, v[2]])?;
            let weighted = t.mul_rows(cat, v[1])?;
            let agg = t.scatter_add_rows(weighted, &dst, 4)?;
            weighted_sum(t, agg)
        });
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn bias_transpose_sub_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4]);
        let z = rand_tensor(&mut rng, &[4, 3]);
        let err = check(vec![x, b, z], |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            let yt = t.transpose(y)?;
            let d = t.sub(yt, v[2])?;
            let s = t.scale(d, -1.5);
            weighted_sum(t, s)
        });
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn sum_gives_ones_and_mse_minimum_gives_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::filled(vec![2, 3], 0.7));
        let l = t.sum(x);
        assert_eq!(t.backward(l).unwrap().get(x).unwrap().data(), &[1.0; 6]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.3, -2.0, 4.0]));
        let l = t.mse(x, x).unwrap();
        assert_eq!(t.value(l).data(), &[0.0]);
        assert_eq!(t.backward(l).unwrap().get(x).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn shared_inputs_accumulate() {
        // loss = sum(x * x) via mul_rows on a column, plus sum(x)
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(3, 1, vec![1.0, -2.0, 0.5]).unwrap());
        let sq = t.mul_rows(x, x).unwrap();
        let s1 = t.sum(sq);
        let s2 = t.sum(x);
        let l = t.add(s1, s2).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::vector(vec![1.0]));
        let x = t.leaf(Tensor::vector(vec![2.0]));
        let s = t.add(c, x).unwrap();
        let l = t.sum(s);
        let g = t.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1.0]);
    }
}
