//! Reverse-mode differentiation on a linear tape.
//!
//! Every backward rule is itself written in terms of tape operations, so the
//! gradients returned by [`Tape::grad`] are ordinary [`Var`]s that can be
//! differentiated again. The inner Wasserstein step needs `∇_Z G` and the
//! phantom backward needs the derivative of that step with respect to the
//! parameters, which is a second-order quantity.

pub mod checks;
mod gradcheck;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use gradcheck::{check_gradient, gradcheck, GradcheckReport};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Arc<Tensor>),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Pow(Var, f64),
    SafeSqrt(Var),
    SafeRecip(Var),
    SumAll(Var),
    Expand(Var),
    SumAxis { a: Var, axis: usize },
    BroadcastAxis { a: Var, axis: usize },
    Reshape(Var),
    SliceCols { a: Var, start: usize },
    PadCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    PairDiff(Var, Var),
    GatherRows { a: Var, idx: Arc<Vec<usize>> },
    ScatterRows { a: Var, idx: Arc<Vec<usize>> },
    MaskedSoftmax(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single-writer record of tensor operations.
///
/// Nodes are appended in evaluation order, so ids are already a topological
/// order and the backward sweep simply walks them in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: impl Into<Arc<Tensor>>) -> Var {
        self.push_shared(value.into(), Op::Leaf, true)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, value: impl Into<Arc<Tensor>>) -> Var {
        self.push_shared(value.into(), Op::Leaf, false)
    }

    /// Constant copy of `v`'s current value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push_shared(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared(&self, v: Var) -> Arc<Tensor> {
        self.nodes[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ---- forward operations ------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        let rg = self.rg(a);
        self.push(out, Op::Neg(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// Elementwise product with a constant of the same shape (masks, one-hots).
    pub fn mul_const(&mut self, a: Var, c: impl Into<Arc<Tensor>>) -> Result<Var> {
        let c = c.into();
        check_same(self.value(a), &c, "mul_const")?;
        let out = self.value(a).zip_map(&c, |x, y| x * y);
        let rg = self.rg(a);
        Ok(self.push(out, Op::MulConst(a, c), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let out = Tensor::matmul(self.value(a), self.value(b), ta, tb)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(out, Op::Log(a), rg)
    }

    pub fn powf(&mut self, a: Var, e: f64) -> Var {
        let out = self.value(a).map(|x| x.powf(e));
        let rg = self.rg(a);
        self.push(out, Op::Pow(a, e), rg)
    }

    /// `√x`, with derivative taken as 0 at `x = 0`.
    pub fn safe_sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0).sqrt());
        let rg = self.rg(a);
        self.push(out, Op::SafeSqrt(a), rg)
    }

    /// `1/x`, and 0 at `x = 0`.
    pub fn safe_recip(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x == 0.0 { 0.0 } else { 1.0 / x });
        let rg = self.rg(a);
        self.push(out, Op::SafeRecip(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::SumAll(a), rg)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.value(a).len() != 1 {
            return Err(Error::shape(format!(
                "expand needs a single element, got {:?}",
                self.shape(a)
            )));
        }
        let out = Tensor::full(shape, self.value(a).item());
        let rg = self.rg(a);
        Ok(self.push(out, Op::Expand(a), rg))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        if axis >= self.value(a).rank() {
            return Err(Error::shape(format!(
                "sum_axis {axis} out of range for {:?}",
                self.shape(a)
            )));
        }
        let out = self.value(a).sum_axis(axis);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SumAxis { a, axis }, rg))
    }

    pub fn broadcast_axis(&mut self, a: Var, axis: usize, len: usize) -> Result<Var> {
        if axis > self.value(a).rank() {
            return Err(Error::shape(format!(
                "broadcast_axis {axis} out of range for {:?}",
                self.shape(a)
            )));
        }
        let out = self.value(a).broadcast_axis(axis, len);
        let rg = self.rg(a);
        Ok(self.push(out, Op::BroadcastAxis { a, axis }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || start + len > t.cols() {
            return Err(Error::shape(format!(
                "slice_cols {start}..{} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let out = t.slice_cols(start, len);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols { a, start }, rg))
    }

    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || start + t.cols() > total {
            return Err(Error::shape(format!(
                "pad_cols at {start} to {total} of {:?}",
                t.shape()
            )));
        }
        let out = t.pad_cols(start, total);
        let rg = self.rg(a);
        Ok(self.push(out, Op::PadCols { a, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::shape("concat_cols of nothing"))?;
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != rows {
                return Err(Error::shape(format!(
                    "concat_cols row mismatch: {:?}",
                    t.shape()
                )));
            }
            total += t.cols();
        }
        let mut out = Tensor::zeros(&[rows, total]);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            for i in 0..rows {
                out.row_mut(i)[off..off + t.cols()].copy_from_slice(t.row(i));
            }
            off += t.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// All pairwise differences `x_i − y_j` as an `n × m × d` tensor.
    pub fn pair_diff(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xt, yt) = (self.value(x), self.value(y));
        if xt.rank() != 2 || yt.rank() != 2 || xt.cols() != yt.cols() {
            return Err(Error::shape(format!(
                "pair_diff: {:?} vs {:?}",
                xt.shape(),
                yt.shape()
            )));
        }
        let (n, m, d) = (xt.rows(), yt.rows(), xt.cols());
        let mut data = Vec::with_capacity(n * m * d);
        for i in 0..n {
            let xi = xt.row(i);
            for j in 0..m {
                data.extend(xi.iter().zip(yt.row(j)).map(|(a, b)| a - b));
            }
        }
        let out = Tensor::from_vec(&[n, m, d], data)?;
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(out, Op::PairDiff(x, y), rg))
    }

    /// Per column `j`, picks row `idx[j]`: `out[j] = a[idx[j], j]`.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || idx.len() != t.cols() || idx.iter().any(|&i| i >= t.rows()) {
            return Err(Error::shape(format!("gather_rows on {:?}", t.shape())));
        }
        let out = Tensor::from_fn(&[t.cols()], |j| t.at(idx[j], j));
        let rg = self.rg(a);
        Ok(self.push(out, Op::GatherRows { a, idx }, rg))
    }

    /// Adjoint of [`Tape::gather_rows`]: places `a[j]` at `(idx[j], j)` of a zero matrix.
    pub fn scatter_rows(&mut self, a: Var, idx: Arc<Vec<usize>>, rows: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 || idx.len() != t.len() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::shape(format!("scatter_rows on {:?}", t.shape())));
        }
        let cols = t.len();
        let mut out = Tensor::zeros(&[rows, cols]);
        for (j, &i) in idx.iter().enumerate() {
            out.data_mut()[i * cols + j] = t.data()[j];
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::ScatterRows { a, idx }, rg))
    }

    /// Max over active rows of each column. Ties go to the first maximal row.
    pub fn masked_max_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || mask.len() != t.rows() {
            return Err(Error::shape(format!(
                "masked_max_rows: {:?} with mask of {}",
                t.shape(),
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::AllMasked);
        }
        let mut idx = Vec::with_capacity(t.cols());
        for j in 0..t.cols() {
            let mut best: Option<usize> = None;
            for (i, &on) in mask.iter().enumerate() {
                if on && best.is_none_or(|b| t.at(i, j) > t.at(b, j)) {
                    best = Some(i);
                }
            }
            idx.push(best.unwrap());
        }
        self.gather_rows(a, Arc::new(idx))
    }

    /// Row-wise softmax where entries with `mask[(i, j)] == false` count as −∞.
    ///
    /// Rows with no admissible entry produce zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &Tensor) -> Result<Var> {
        let t = self.value(a);
        check_same(t, mask, "masked_softmax")?;
        if t.rank() != 2 {
            return Err(Error::shape("masked_softmax needs a matrix"));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let row = t.row(i);
            let m = mask.row(i);
            let mx = row
                .iter()
                .zip(m)
                .filter(|(_, &on)| on != 0.0)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let o = out.row_mut(i);
            let mut z = 0.0;
            for j in 0..c {
                if m[j] != 0.0 {
                    o[j] = (row[j] - mx).exp();
                    z += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::MaskedSoftmax(a), rg))
    }

    // ---- composites --------------------------------------------------------

    /// `x · W + b` with `x: n×i`, `W: i×o`, `b: o`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let n = self.value(x).rows();
        let bb = self.broadcast_axis(b, 0, n)?;
        self.add(xw, bb)
    }

    /// Per-row layer normalization with learned gain and bias (both length `k`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (n, k) = (self.value(x).rows(), self.value(x).cols());
        let s = self.sum_axis(x, 1)?;
        let mean = self.scale(s, 1.0 / k as f64);
        let mb = self.broadcast_axis(mean, 1, k)?;
        let xc = self.sub(x, mb)?;
        let sq = self.mul(xc, xc)?;
        let vs = self.sum_axis(sq, 1)?;
        let var = self.scale(vs, 1.0 / k as f64);
        let ve = self.add_scalar(var, eps);
        let inv = self.powf(ve, -0.5);
        let ib = self.broadcast_axis(inv, 1, k)?;
        let y = self.mul(xc, ib)?;
        let gb = self.broadcast_axis(gain, 0, n)?;
        let bb = self.broadcast_axis(bias, 0, n)?;
        let yg = self.mul(y, gb)?;
        self.add(yg, bb)
    }

    /// Zeroes rows whose mask entry is false.
    pub fn mask_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (n, k) = (self.value(x).rows(), self.value(x).cols());
        if mask.len() != n {
            return Err(Error::shape(format!(
                "row mask of {} for {n} rows",
                mask.len()
            )));
        }
        if mask.iter().all(|&m| m) {
            return Ok(x);
        }
        let m = Tensor::from_fn(&[n, k], |i| if mask[i / k] { 1.0 } else { 0.0 });
        self.mul_const(x, m)
    }

    /// Keeps `x` on rows where `keep` is false and takes `replacement` where it is true.
    pub fn overwrite_rows(&mut self, x: Var, replacement: Var, keep: &[bool]) -> Result<Var> {
        if !keep.iter().any(|&p| p) {
            return Ok(x);
        }
        let free: Vec<bool> = keep.iter().map(|&p| !p).collect();
        let a = self.mask_rows(x, &free)?;
        let b = self.mask_rows(replacement, keep)?;
        self.add(a, b)
    }

    /// Mean over active rows: `n × k → k`.
    pub fn masked_mean_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let active = mask.iter().filter(|&&m| m).count();
        if active == 0 {
            return Err(Error::AllMasked);
        }
        let xm = self.mask_rows(x, mask)?;
        let s = self.sum_axis(xm, 0)?;
        Ok(self.scale(s, 1.0 / active as f64))
    }

    /// Euclidean distance matrix `‖x_i − y_j‖`, with zero derivative at coincidence.
    pub fn pairwise_distance(&mut self, x: Var, y: Var) -> Result<Var> {
        let diff = self.pair_diff(x, y)?;
        let sq = self.mul(diff, diff)?;
        let d2 = self.sum_axis(sq, 2)?;
        Ok(self.safe_sqrt(d2))
    }

    // ---- reverse mode -------------------------------------------------------

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, g: Var) -> Result<()> {
        if !self.rg(target) {
            return Ok(());
        }
        adj[target.0] = Some(match adj[target.0] {
            None => g,
            Some(prev) => self.add(prev, g)?,
        });
        Ok(())
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The returned vars live on this tape and are themselves differentiable.
    /// Inputs the output does not depend on get a zero constant.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.value(output).len() != 1 {
            return Err(Error::NotScalarOutput(self.shape(output).to_vec()));
        }
        let mut adj: Vec<Option<Var>> = vec![None; output.0 + 1];
        if self.rg(output) {
            let seed = Tensor::full(self.shape(output), 1.0);
            adj[output.0] = Some(self.constant(seed));
        }
        // nothing below the earliest requested node can reach it
        let lowest = wrt.iter().map(|w| w.0).min().unwrap_or(0);
        for i in (lowest..=output.0).rev() {
            let Some(g) = adj[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let this = Var(i);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, a, g)?;
                    self.accumulate(&mut adj, b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, a, g)?;
                    if self.rg(b) {
                        let ng = self.neg(g);
                        self.accumulate(&mut adj, b, ng)?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        let ga = self.mul(g, b)?;
                        self.accumulate(&mut adj, a, ga)?;
                    }
                    if self.rg(b) {
                        let gb = self.mul(g, a)?;
                        self.accumulate(&mut adj, b, gb)?;
                    }
                }
                Op::Neg(a) => {
                    let ga = self.neg(g);
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(g, c);
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::AddScalar(a) => self.accumulate(&mut adj, a, g)?,
                Op::MulConst(a, c) => {
                    let ga = self.mul_const(g, c)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::MatMul { a, b, ta, tb } => {
                    if self.rg(a) {
                        let ga = if ta {
                            self.matmul_t(b, g, tb, true)?
                        } else {
                            self.matmul_t(g, b, false, !tb)?
                        };
                        self.accumulate(&mut adj, a, ga)?;
                    }
                    if self.rg(b) {
                        let gb = if tb {
                            self.matmul_t(g, a, true, ta)?
                        } else {
                            self.matmul_t(a, g, !ta, false)?
                        };
                        self.accumulate(&mut adj, b, gb)?;
                    }
                }
                Op::Relu(a) => {
                    let step = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    let ga = self.mul_const(g, step)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Exp(a) => {
                    let ga = self.mul(g, this)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Log(a) => {
                    let inv = self.powf(a, -1.0);
                    let ga = self.mul(g, inv)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Pow(a, e) => {
                    let p = self.powf(a, e - 1.0);
                    let d = self.scale(p, e);
                    let ga = self.mul(g, d)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::SafeSqrt(a) => {
                    let r = self.safe_recip(this);
                    let d = self.scale(r, 0.5);
                    let ga = self.mul(g, d)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::SafeRecip(a) => {
                    let r2 = self.mul(this, this)?;
                    let d = self.neg(r2);
                    let ga = self.mul(g, d)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::SumAll(a) => {
                    let shape = self.shape(a).to_vec();
                    let ga = self.expand(g, &shape)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Expand(a) => {
                    let s = self.sum(g);
                    let shape = self.shape(a).to_vec();
                    let ga = self.reshape(s, &shape)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::SumAxis { a, axis } => {
                    let len = self.shape(a)[axis];
                    let ga = self.broadcast_axis(g, axis, len)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::BroadcastAxis { a, axis } => {
                    let ga = self.sum_axis(g, axis)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Reshape(a) => {
                    let shape = self.shape(a).to_vec();
                    let ga = self.reshape(g, &shape)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::SliceCols { a, start } => {
                    let total = self.value(a).cols();
                    let ga = self.pad_cols(g, start, total)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::PadCols { a, start } => {
                    let len = self.value(a).cols();
                    let ga = self.slice_cols(g, start, len)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.value(p).cols();
                        if self.rg(p) {
                            let gp = self.slice_cols(g, off, len)?;
                            self.accumulate(&mut adj, p, gp)?;
                        }
                        off += len;
                    }
                }
                Op::PairDiff(x, y) => {
                    if self.rg(x) {
                        let gx = self.sum_axis(g, 1)?;
                        self.accumulate(&mut adj, x, gx)?;
                    }
                    if self.rg(y) {
                        let s = self.sum_axis(g, 0)?;
                        let gy = self.neg(s);
                        self.accumulate(&mut adj, y, gy)?;
                    }
                }
                Op::GatherRows { a, idx } => {
                    let rows = self.value(a).rows();
                    let ga = self.scatter_rows(g, idx, rows)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::ScatterRows { a, idx } => {
                    let ga = self.gather_rows(g, idx)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::MaskedSoftmax(a) => {
                    // dx = y ⊙ (g − rowsum(g ⊙ y))
                    let cols = self.value(a).cols();
                    let gy = self.mul(g, this)?;
                    let s = self.sum_axis(gy, 1)?;
                    let sb = self.broadcast_axis(s, 1, cols)?;
                    let centered = self.sub(g, sb)?;
                    let ga = self.mul(this, centered)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
            }
        }
        wrt.iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let z = Tensor::zeros(self.shape(w));
                    Ok(self.constant(z))
                }
            })
            .collect()
    }

    /// Convenience: gradient values without keeping handles.
    pub fn grad_values(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let gs = self.grad(output, wrt)?;
        Ok(gs.into_iter().map(|g| self.value(g).clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn relu_backward_passes_or_blocks() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.5, -2.0]));
        let y = tape.relu(x);
        let s = tape.sum(y);
        let g = tape.grad_values(s, &[x]).unwrap();
        assert_eq!(g[0].data(), &[1.0, 0.0]);
    }

    #[test]
    fn single_unmasked_logit_softmax_is_constant() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 3], &[0.3, -1.0, 2.0]));
        let mask = t(&[1, 3], &[0.0, 1.0, 0.0]);
        let y = tape.masked_softmax(x, &mask).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 0.0]);
        let w = tape.constant(t(&[1, 3], &[0.7, -0.2, 1.1]));
        let p = tape.mul(y, w).unwrap();
        let s = tape.sum(p);
        let g = tape.grad_values(s, &[x]).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_of_leaf_has_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[3, 4], |i| i as f64));
        let s = tape.sum(x);
        let g = tape.grad_values(s, &[x]).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn independent_leaf_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 2], 1.0));
        let y = tape.leaf(Tensor::full(&[3], 2.0));
        let s = tape.sum(x);
        let g = tape.grad_values(s, &[y]).unwrap();
        assert_eq!(g[0], Tensor::zeros(&[3]));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0));
        assert!(matches!(
            tape.grad(x, &[x]),
            Err(Error::NotScalarOutput(_))
        ));
    }

    #[test]
    fn max_pool_ties_route_to_first_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3, 1], &[2.0, 2.0, 1.0]));
        let m = tape.masked_max_rows(x, &[true, true, true]).unwrap();
        let s = tape.sum(m);
        let g = tape.grad_values(s, &[x]).unwrap();
        assert_eq!(g[0].data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn masked_rows_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[3, 2], |i| i as f64 - 2.5));
        let mask = [true, false, true];
        let m = tape.masked_mean_rows(x, &mask).unwrap();
        let p = tape.masked_max_rows(x, &mask).unwrap();
        let a = tape.add(m, p).unwrap();
        let e = tape.exp(a);
        let s = tape.sum(e);
        let g = tape.grad_values(s, &[x]).unwrap();
        assert_eq!(g[0].row(1), &[0.0, 0.0]);
    }

    #[test]
    fn second_order_of_cube() {
        // d/dx (d/dx x^3) = 6x
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[1.7]));
        let c = tape.powf(x, 3.0);
        let s = tape.sum(c);
        let g = tape.grad(s, &[x]).unwrap()[0];
        let gs = tape.sum(g);
        let h = tape.grad_values(gs, &[x]).unwrap();
        assert!((h[0].data()[0] - 6.0 * 1.7).abs() < 1e-12);
    }

    #[test]
    fn pairwise_distance_at_coincidence_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[0.0, 0.0, 0.0, 0.0]));
        let d = tape.pairwise_distance(x, x).unwrap();
        let s = tape.sum(d);
        let g = tape.grad_values(s, &[x]).unwrap();
        assert!(g[0].data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.37).sin()));
            let b = tape.leaf(Tensor::from_fn(&[3, 2], |i| (i as f64 * 0.91).cos()));
            let c = tape.matmul(a, b).unwrap();
            let e = tape.exp(c);
            let s = tape.sum(e);
            tape.grad_values(s, &[a, b]).unwrap()
        };
        assert_eq!(run(), run());
    }
}
