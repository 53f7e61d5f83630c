//! Tape-based reverse-mode differentiation over [`Tensor2`] values.
//!
//! Every operation appends a node holding its forward value and the indices
//! of its inputs. [`Tape::backward`] walks the nodes in exact reverse order of
//! recording and accumulates adjoints into the inputs of each node.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use super::special::{digamma_unchecked, lgamma_unchecked, trigamma_unchecked};
use super::tensor::Tensor2;
use crate::error::{bail, Result};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: usize,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    AddScalar(usize, usize),
    MulScalar(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Tanh(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    Relu(usize),
    Lgamma(usize),
    Digamma(usize),
    Sum(usize),
    MeanRows(usize),
    RmsNormRows(usize, f64),
    SoftmaxRows(usize),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    Entry(usize, usize, usize),
    SelectRow(usize, usize),
    LogMass(usize, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor2,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor2> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.idx).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, zero-filled with the given shape when absent.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Tensor2 {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor2::zeros(shape.0, shape.1))
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        libm::exp(x)
    } else {
        libm::log1p(libm::exp(x))
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

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + libm::log(values.map(|v| libm::exp(v - m)).sum::<f64>())
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    #[inline]
    fn node(&self, v: Var) -> &Node {
        debug_assert_eq!(v.tape, self.id, "variable recorded on another tape");
        &self.nodes[v.idx]
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.node(v).value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value.item()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a.idx, b.idx), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMulT(a.idx, b.idx), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a.idx), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a.idx, b.idx), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a.idx, b.idx), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a.idx, b.idx), ng))
    }

    fn check_row(&self, a: Var, row: Var) -> Result<()> {
        let (ra, ca) = self.value(a).shape();
        let (rr, cr) = self.value(row).shape();
        if rr != 1 || cr != ca {
            bail!(Dimension, "row {}x{} cannot broadcast over {}x{}", rr, cr, ra, ca);
        }
        Ok(())
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row)?;
        let r = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(value, Op::AddRow(a.idx, row.idx), ng))
    }

    /// Multiplies every row of `a` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row)?;
        let r = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r) {
                *x *= b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(value, Op::MulRow(a.idx, row.idx), ng))
    }

    fn check_scalar(&self, s: Var) -> Result<f64> {
        let t = self.value(s);
        if t.shape() != (1, 1) {
            bail!(Dimension, "expected a 1x1 scalar, got {:?}", t.shape());
        }
        Ok(t.item())
    }

    /// Adds a `1×1` scalar to every entry of `a`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.check_scalar(s)?;
        let value = self.value(a).map(|x| x + c);
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(value, Op::AddScalar(a.idx, s.idx), ng))
    }

    /// Multiplies every entry of `a` by a `1×1` scalar.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.check_scalar(s)?;
        let value = self.value(a).map(|x| x * c);
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(value, Op::MulScalar(a.idx, s.idx), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a.idx, c), ng)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(value, Op::Offset(a.idx), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a.idx), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(value, Op::Softplus(a.idx), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::exp);
        let ng = self.ng(a);
        self.push(value, Op::Exp(a.idx), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::log);
        let ng = self.ng(a);
        self.push(value, Op::Ln(a.idx), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a.idx), ng)
    }

    fn check_positive(&self, a: Var, what: &str) -> Result<()> {
        if let Some(x) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            bail!(Domain, "{} requires positive arguments, got {}", what, x);
        }
        Ok(())
    }

    pub fn lgamma(&mut self, a: Var) -> Result<Var> {
        self.check_positive(a, "lgamma")?;
        let value = self.value(a).map(lgamma_unchecked);
        let ng = self.ng(a);
        Ok(self.push(value, Op::Lgamma(a.idx), ng))
    }

    pub fn digamma(&mut self, a: Var) -> Result<Var> {
        self.check_positive(a, "digamma")?;
        let value = self.value(a).map(digamma_unchecked);
        let ng = self.ng(a);
        Ok(self.push(value, Op::Digamma(a.idx), ng))
    }

    /// Sum of all entries as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor2::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a.idx), ng)
    }

    /// Column means, `r×c → 1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = t.shape();
        let mut out = Tensor2::zeros(1, c);
        for i in 0..r {
            for (o, x) in out.data_mut().iter_mut().zip(t.row(i)) {
                *o += x;
            }
        }
        let value = out.scale(1.0 / r as f64);
        let ng = self.ng(a);
        self.push(value, Op::MeanRows(a.idx), ng)
    }

    /// Row-wise `x / sqrt(mean(x²) + eps)`.
    pub fn rms_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let value = rms_norm_rows(self.value(a), eps);
        let ng = self.ng(a);
        self.push(value, Op::RmsNormRows(a.idx, eps), ng)
    }

    /// Row-wise softmax. `-inf` entries receive zero probability, which is how
    /// callers express causal masking.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a.idx), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.cols() {
            bail!(Dimension, "columns {}..{} out of {}", start, start + len, t.cols());
        }
        let value = t.slice_cols(start, len);
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceCols(a.idx, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(p) => self.value(*p).rows(),
            None => bail!(Dimension, "concat of zero parts"),
        };
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor2::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rows() != rows {
                bail!(Dimension, "concat rows {} vs {}", t.rows(), rows);
            }
            for i in 0..rows {
                out.row_mut(i)[off..off + t.cols()].copy_from_slice(t.row(i));
            }
            off += t.cols();
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(out, Op::ConcatCols(parts.iter().map(|p| p.idx).collect()), ng))
    }

    /// Single entry as a `1×1` node.
    pub fn entry(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        let t = self.value(a);
        if r >= t.rows() || c >= t.cols() {
            bail!(Dimension, "entry ({}, {}) out of {:?}", r, c, t.shape());
        }
        let value = Tensor2::scalar(t.get(r, c));
        let ng = self.ng(a);
        Ok(self.push(value, Op::Entry(a.idx, r, c), ng))
    }

    pub fn select_row(&mut self, a: Var, r: usize) -> Result<Var> {
        let t = self.value(a);
        if r >= t.rows() {
            bail!(Dimension, "row {} out of {}", r, t.rows());
        }
        let value = Tensor2::row_vector(t.row(r));
        let ng = self.ng(a);
        Ok(self.push(value, Op::SelectRow(a.idx, r), ng))
    }

    /// For a `1×V` row of logits, `ln Σ_{k∈indices} softmax(logits)_k`.
    pub fn log_mass(&mut self, logits: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rows() != 1 {
            bail!(Dimension, "log_mass expects a row vector, got {:?}", t.shape());
        }
        if indices.is_empty() || indices.iter().any(|&k| k >= t.cols()) {
            bail!(Input, "log_mass index set invalid for {} classes", t.cols());
        }
        let row = t.row(0);
        let all = log_sum_exp(row.iter().copied());
        let sel = log_sum_exp(indices.iter().map(|&k| row[k]));
        let value = Tensor2::scalar(sel - all);
        let ng = self.ng(logits);
        Ok(self.push(value, Op::LogMass(logits.idx, indices.to_vec()), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            bail!(Usage, "loss variable was not recorded on this tape");
        }
        if self.nodes[loss.idx].value.shape() != (1, 1) {
            bail!(
                Usage,
                "loss must be a scalar, got {:?}",
                self.nodes[loss.idx].value.shape()
            );
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(Tensor2::scalar(1.0));
        for idx in (0..=loss.idx).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        // non-trainable nodes carry no meaningful gradient for callers
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor2, grads: &mut [Option<Tensor2>]) {
        let val = |i: usize| &self.nodes[i].value;
        let ng = |i: usize| self.nodes[i].needs_grad;
        let mut acc = |i: usize, d: Tensor2| {
            if !self.nodes[i].needs_grad {
                return;
            }
            match &mut grads[i] {
                Some(existing) => existing.add_assign_scaled(&d, 1.0),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if ng(*a) {
                    acc(*a, g.matmul_t(val(*b)).expect("shapes checked at record"));
                }
                if ng(*b) {
                    acc(*b, val(*a).transpose().matmul(g).expect("shapes checked"));
                }
            }
            Op::MatMulT(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if ng(*a) {
                    acc(*a, g.matmul(val(*b)).expect("shapes checked"));
                }
                if ng(*b) {
                    acc(*b, g.transpose().matmul(val(*a)).expect("shapes checked"));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    acc(*a, g.hadamard(val(*b)).expect("shapes checked"));
                }
                if ng(*b) {
                    acc(*b, g.hadamard(val(*a)).expect("shapes checked"));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if ng(*row) {
                    acc(*row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let r = val(*row);
                if ng(*a) {
                    let mut d = g.clone();
                    for i in 0..d.rows() {
                        for (x, s) in d.row_mut(i).iter_mut().zip(r.data()) {
                            *x *= s;
                        }
                    }
                    acc(*a, d);
                }
                if ng(*row) {
                    acc(*row, column_sums(&g.hadamard(val(*a)).expect("shapes checked")));
                }
            }
            Op::AddScalar(a, s) => {
                acc(*a, g.clone());
                acc(*s, Tensor2::scalar(g.sum()));
            }
            Op::MulScalar(a, s) => {
                let c = val(*s).item();
                if ng(*a) {
                    acc(*a, g.scale(c));
                }
                if ng(*s) {
                    acc(*s, Tensor2::scalar(g.hadamard(val(*a)).expect("shapes checked").sum()));
                }
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c)),
            Op::Offset(a) => acc(*a, g.clone()),
            Op::Tanh(a) => {
                let d = g
                    .zip_map(&node.value, |gi, y| gi * (1.0 - y * y))
                    .expect("shapes checked");
                acc(*a, d);
            }
            Op::Softplus(a) => {
                let d = g
                    .zip_map(val(*a), |gi, x| gi * sigmoid(x))
                    .expect("shapes checked");
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, g.hadamard(&node.value).expect("shapes checked")),
            Op::Ln(a) => acc(*a, g.zip_map(val(*a), |gi, x| gi / x).expect("shapes checked")),
            Op::Relu(a) => acc(
                *a,
                g.zip_map(val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 })
                    .expect("shapes checked"),
            ),
            Op::Lgamma(a) => acc(
                *a,
                g.zip_map(val(*a), |gi, x| gi * digamma_unchecked(x))
                    .expect("shapes checked"),
            ),
            Op::Digamma(a) => acc(
                *a,
                g.zip_map(val(*a), |gi, x| gi * trigamma_unchecked(x))
                    .expect("shapes checked"),
            ),
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Tensor2::filled(r, c, g.item()));
            }
            Op::MeanRows(a) => {
                let (r, c) = val(*a).shape();
                let mut d = Tensor2::zeros(r, c);
                for i in 0..r {
                    for (x, gi) in d.row_mut(i).iter_mut().zip(g.data()) {
                        *x = gi / r as f64;
                    }
                }
                acc(*a, d);
            }
            Op::RmsNormRows(a, eps) => {
                let x = val(*a);
                let (r, c) = x.shape();
                let mut d = Tensor2::zeros(r, c);
                for i in 0..r {
                    let xr = x.row(i);
                    let gr = g.row(i);
                    let ms = xr.iter().map(|v| v * v).sum::<f64>() / c as f64 + eps;
                    let inv = 1.0 / libm::sqrt(ms);
                    let gx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                    let k = inv * inv * inv * gx / c as f64;
                    for ((o, gv), xv) in d.row_mut(i).iter_mut().zip(gr).zip(xr) {
                        *o = gv * inv - xv * k;
                    }
                }
                acc(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (r, c) = y.shape();
                let mut d = Tensor2::zeros(r, c);
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dotp: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, yv), gv) in d.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dotp);
                    }
                }
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut d = Tensor2::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if ng(p) {
                        acc(p, g.slice_cols(off, w));
                    }
                    off += w;
                }
            }
            Op::Entry(a, r, c) => {
                let (rr, cc) = val(*a).shape();
                let mut d = Tensor2::zeros(rr, cc);
                d.set(*r, *c, g.item());
                acc(*a, d);
            }
            Op::SelectRow(a, r) => {
                let (rr, cc) = val(*a).shape();
                let mut d = Tensor2::zeros(rr, cc);
                d.row_mut(*r).copy_from_slice(g.data());
                acc(*a, d);
            }
            Op::LogMass(a, indices) => {
                let row = val(*a).row(0);
                let all = log_sum_exp(row.iter().copied());
                let sel = log_sum_exp(indices.iter().map(|&k| row[k]));
                let gi = g.item();
                let mut d = Tensor2::zeros(1, row.len());
                for (k, o) in d.data_mut().iter_mut().enumerate() {
                    *o = -gi * libm::exp(row[k] - all);
                }
                for &k in indices {
                    d.data_mut()[k] += gi * libm::exp(row[k] - sel);
                }
                acc(*a, d);
            }
        }
    }
}

fn column_sums(g: &Tensor2) -> Tensor2 {
    let mut out = Tensor2::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, x) in out.data_mut().iter_mut().zip(g.row(i)) {
            *o += x;
        }
    }
    out
}

pub(crate) fn rms_norm_rows(x: &Tensor2, eps: f64) -> Tensor2 {
    let (r, c) = x.shape();
    let mut out = x.clone();
    for i in 0..r {
        let ms = x.row(i).iter().map(|v| v * v).sum::<f64>() / c as f64 + eps;
        let inv = 1.0 / libm::sqrt(ms);
        for v in out.row_mut(i) {
            *v *= inv;
        }
    }
    out
}

pub(crate) fn softmax_rows(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for i in 0..x.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = if *v == f64::NEG_INFINITY {
            0.0
        } else {
            libm::exp(*v - m)
        };
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let w = t.param(Tensor2::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let l = t.sum(w);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap(), &Tensor2::ones(2, 2));
    }

    #[test]
    fn square_gradient_is_twice() {
        let mut t = Tape::new();
        let w = t.param(Tensor2::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let sq = t.mul(w, w).unwrap();
        let l = t.sum(sq);
        let g = t.backward(l).unwrap();
        assert_eq!(
            g.get(w).unwrap(),
            &Tensor2::from_rows(&[&[2.0, 4.0], &[6.0, 8.0]]).unwrap()
        );
    }

    #[test]
    fn backward_rejects_foreign_loss() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.param(Tensor2::scalar(1.0));
        let _ = b.param(Tensor2::scalar(1.0));
        assert!(matches!(b.backward(x), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor2::zeros(2, 2));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor2::scalar(3.0));
        let x = t.param(Tensor2::scalar(2.0));
        let y = t.mul(c, x).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().item(), 3.0);
    }

    #[test]
    fn softmax_masks_negative_infinity() {
        let x = Tensor2::from_rows(&[&[0.0, f64::NEG_INFINITY, 0.0]]).unwrap();
        let y = softmax_rows(&x);
        assert_eq!(y.row(0), &[0.5, 0.0, 0.5]);
    }
}
