//! Define-by-run reverse-mode tape.
//!
//! Every operation appends one node holding its forward value. Nodes only
//! reference earlier nodes, so a single reverse sweep over the node list is a
//! valid topological order for the backward pass.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::special;
use super::tensor::{gemm_acc, gemm_tn_acc, transpose, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row ranges of a stacked matrix, one per batch item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Result<Self> {
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        offsets.push(0);
        for &len in lengths {
            if len == 0 {
                return Err(Error::usage("empty segment"));
            }
            offsets.push(offsets[offsets.len() - 1] + len);
        }
        if lengths.is_empty() {
            return Err(Error::usage("no segments"));
        }
        Ok(Segments { offsets })
    }

    pub fn single(len: usize) -> Result<Self> {
        Self::from_lengths(&[len])
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        self.offsets[self.offsets.len() - 1]
    }

    /// `(start, len)` of each segment.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.offsets.windows(2).map(|w| (w[0], w[1] - w[0]))
    }

    pub fn range(&self, i: usize) -> core::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Softplus,
    Log,
    Sigmoid,
    Gelu,
    Lgamma,
    Exp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    ScaleShift(Var, Vec<f64>),
    Sum(Var),
    Unary(Var, Unary),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, segments: Segments, probs: Vec<f64> },
    SegmentSoftmax(Var, Segments),
    SegmentWeightedSum { w: Var, h: Var, segments: Segments },
    SegmentSum(Var, Segments),
    Periodic { freqs: Var, x: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    leaf: Option<LeafInfo>,
}

#[derive(Debug)]
struct LeafInfo {
    name: String,
    requires_grad: bool,
}

/// Recorded computation. Confined to one thread; build a fresh tape per
/// training step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of every `requires_grad` leaf, in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    entries: Vec<(Var, String, Tensor)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(_, n, _)| n == name).map(|(_, _, t)| t)
    }

    pub fn of(&self, var: Var) -> Option<&Tensor> {
        self.entries.iter().find(|(v, _, _)| *v == var).map(|(_, _, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(_, n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn dims_of(t: &Tensor) -> (usize, usize) {
    t.dims2()
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

    /// Drops every recorded node.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op, leaf: None });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. It receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, name: impl Into<String>, t: &Tensor) -> Var {
        let (rows, cols) = dims_of(t);
        let var = self.push(rows, cols, t.data().to_vec(), Op::Leaf);
        self.nodes[var.0].leaf = Some(LeafInfo { name: name.into(), requires_grad: t.requires_grad() });
        var
    }

    /// Records a trainable input regardless of the tensor's flag.
    pub fn param(&mut self, name: impl Into<String>, t: &Tensor) -> Var {
        let var = self.leaf(name, t);
        self.nodes[var.0].leaf.as_mut().unwrap().requires_grad = true;
        var
    }

    /// Records a constant from raw data.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::dim("constant", format!("{rows}x{cols} with {} values", data.len())));
        }
        let var = self.push(rows, cols, data, Op::Leaf);
        self.nodes[var.0].leaf = Some(LeafInfo { name: String::new(), requires_grad: false });
        Ok(var)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node shape is consistent")
    }

    /// Softmax weights saved by an [`Tape::attention`] node, `heads×N×N`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::dim(op, format!("{da:?} vs {db:?}")));
        }
        Ok(da)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let out = transpose(self.value(a), m, n);
        self.push(n, m, out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(m, n, out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(m, n, out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(m, n, out, Op::Mul(a, b)))
    }

    /// `x + row` with the row broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let (rr, rc) = self.dims(row);
        if rr * rc != n {
            return Err(Error::dim("add_row", format!("{m}x{n} + {rr}x{rc}")));
        }
        let r = self.value(row);
        let out = self.value(x).chunks(n).flat_map(|xr| xr.iter().zip(r).map(|(a, b)| a + b)).collect();
        Ok(self.push(m, n, out, Op::AddRow(x, row)))
    }

    /// `scale·x + shift` elementwise with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (m, n) = self.dims(x);
        let out = self.value(x).iter().map(|v| scale * v + shift).collect();
        self.push(m, n, out, Op::Affine(x, scale))
    }

    /// Elementwise `scale ⊙ x + shift` with constant tensors of `x`'s size.
    pub fn scale_shift(&mut self, x: Var, scale: Vec<f64>, shift: &[f64]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if scale.len() != m * n || shift.len() != m * n {
            return Err(Error::dim(
                "scale_shift",
                format!("{m}x{n} vs {} scales, {} shifts", scale.len(), shift.len()),
            ));
        }
        let out = self.value(x).iter().zip(&scale).zip(shift).map(|((v, a), b)| a * v + b).collect();
        Ok(self.push(m, n, out, Op::ScaleShift(x, scale)))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        let zeros = vec![0.0; c.len()];
        self.scale_shift(x, c, &zeros)
    }

    fn check_column(&self, op: &'static str, x: Var, segments: &Segments) -> Result<()> {
        let (m, n) = self.dims(x);
        if n != 1 || m != segments.total() {
            return Err(Error::dim(op, format!("{m}x{n} against {} segmented rows", segments.total())));
        }
        Ok(())
    }

    /// Softmax of a column vector within each segment.
    pub fn segment_softmax(&mut self, x: Var, segments: &Segments) -> Result<Var> {
        self.check_column("segment_softmax", x, segments)?;
        let mut out = self.value(x).to_vec();
        for (start, len) in segments.iter() {
            softmax_in_place(&mut out[start..start + len]);
        }
        Ok(self.push(segments.total(), 1, out, Op::SegmentSoftmax(x, segments.clone())))
    }

    /// Row `i` of the result is `Σ_{r ∈ segment i} w[r]·h[r]`.
    pub fn segment_weighted_sum(&mut self, w: Var, h: Var, segments: &Segments) -> Result<Var> {
        self.check_column("segment_weighted_sum", w, segments)?;
        let (rows, d) = self.dims(h);
        if rows != segments.total() {
            return Err(Error::dim("segment_weighted_sum", format!("{rows} rows against {}", segments.total())));
        }
        let (wv, hv) = (self.value(w), self.value(h));
        let mut out = vec![0.0; segments.count() * d];
        for (i, (start, len)) in segments.iter().enumerate() {
            let dst = &mut out[i * d..(i + 1) * d];
            for r in start..start + len {
                axpy(dst, &hv[r * d..(r + 1) * d], wv[r]);
            }
        }
        Ok(self.push(segments.count(), d, out, Op::SegmentWeightedSum { w, h, segments: segments.clone() }))
    }

    /// Per-segment sums of a column vector, one row per segment.
    pub fn segment_sum(&mut self, x: Var, segments: &Segments) -> Result<Var> {
        self.check_column("segment_sum", x, segments)?;
        let xv = self.value(x);
        let out = segments.iter().map(|(s, l)| xv[s..s + l].iter().fold(0.0, |a, v| a + v)).collect();
        Ok(self.push(segments.count(), 1, out, Op::SegmentSum(x, segments.clone())))
    }

    /// Sum of all entries, left to right.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().fold(0.0, |acc, v| acc + v);
        self.push(1, 1, vec![s], Op::Sum(x))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        let (m, n) = self.dims(x);
        let src = self.value(x);
        let out: Vec<f64> = match f {
            Unary::Softplus => src.iter().map(|&v| special::softplus(v)).collect(),
            Unary::Sigmoid => src.iter().map(|&v| special::sigmoid(v)).collect(),
            Unary::Gelu => src.iter().map(|&v| special::gelu(v)).collect(),
            Unary::Exp => src.iter().map(|&v| special::exp(v)).collect(),
            Unary::Log => src.iter().map(|&v| special::log_checked(v)).collect::<Result<_>>()?,
            Unary::Lgamma => src.iter().map(|&v| special::lgamma(v)).collect::<Result<_>>()?,
        };
        Ok(self.push(m, n, out, Op::Unary(x, f)))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus).expect("softplus is total")
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu).expect("gelu is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid).expect("sigmoid is total")
    }

    pub fn lgamma(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Lgamma)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(m, n, out, Op::SoftmaxRows(x))
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        let (gr, gc) = self.dims(gain);
        let (br, bc) = self.dims(bias);
        if gr * gc != n || br * bc != n {
            return Err(Error::dim("layer_norm", format!("width {n}, gain {gr}x{gc}, bias {br}x{bc}")));
        }
        if !(eps > 0.0) {
            return Err(Error::Domain { op: "layer_norm", value: eps });
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in self.value(x).chunks(n) {
            let mean = row.iter().fold(0.0, |a, v| a + v) / n as f64;
            let var = row.iter().fold(0.0, |a, v| a + (v - mean) * (v - mean)) / n as f64;
            let inv = 1.0 / special::sqrt(var + eps);
            inv_std.push(inv);
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        Ok(self.push(m, n, out, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// Unmasked multi-head scaled dot-product attention over `N×d` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let segments = Segments::single(self.dims(q).0)?;
        self.attention_segments(q, k, v, heads, &segments)
    }

    /// Attention restricted to each segment of stacked rows: a token only
    /// attends to tokens of its own batch item.
    pub fn attention_segments(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: &Segments) -> Result<Var> {
        let (rows, d) = self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim("attention", format!("width {d} not divisible into {heads} heads")));
        }
        if rows != segments.total() {
            return Err(Error::dim("attention", format!("{rows} rows against {} segmented rows", segments.total())));
        }
        let dh = d / heads;
        let scale = 1.0 / special::sqrt(dh as f64);
        let mut out = vec![0.0; rows * d];
        let prob_len: usize = segments.iter().map(|(_, n)| heads * n * n).sum();
        let mut probs = vec![0.0; prob_len];
        let mut p_off = 0;
        for (start, n) in segments.iter() {
            let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
            for h in 0..heads {
                let qh = head_cols(qv, start, n, d, h, dh);
                let kh = head_cols(kv, start, n, d, h, dh);
                let vh = head_cols(vv, start, n, d, h, dh);
                let p = &mut probs[p_off..p_off + n * n];
                p_off += n * n;
                let kt = transpose(&kh, n, dh);
                gemm_acc(&qh, &kt, p, n, dh, n);
                for row in p.chunks_mut(n) {
                    for s in row.iter_mut() {
                        *s *= scale;
                    }
                    softmax_in_place(row);
                }
                let mut oh = vec![0.0; n * dh];
                gemm_acc(p, &vh, &mut oh, n, n, dh);
                scatter_head_cols(&oh, &mut out, start, n, d, h, dh);
            }
        }
        let segments = segments.clone();
        Ok(self.push(rows, d, out, Op::Attention { q, k, v, heads, segments, probs }))
    }

    /// Periodic features of constant scalars `x` at learnable frequencies:
    /// row `i` is `[sin(2π c_j x_i)]_j ++ [cos(2π c_j x_i)]_j`.
    pub fn periodic(&mut self, x: &[f64], freqs: Var) -> Result<Var> {
        if x.is_empty() {
            return Err(Error::usage("periodic embedding of an empty score vector"));
        }
        let f = self.value(freqs).len();
        let tau = 2.0 * core::f64::consts::PI;
        let c = self.value(freqs);
        let mut out = Vec::with_capacity(x.len() * 2 * f);
        for &xi in x {
            out.extend(c.iter().map(|&cj| special::sin(tau * cj * xi)));
            out.extend(c.iter().map(|&cj| special::cos(tau * cj * xi)));
        }
        Ok(self.push(x.len(), 2 * f, out, Op::Periodic { freqs, x: x.to_vec() }))
    }

    /// Gradients of a scalar `loss` with respect to every trainable leaf.
    ///
    /// The tape itself is not modified, so calling this twice returns the
    /// same gradients both times.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.dims(loss) != (1, 1) {
            return Err(Error::usage(format!("backward needs a scalar loss, got {:?}", self.dims(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut entries = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(info) = &node.leaf {
                if info.requires_grad {
                    let g = grads[idx].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                    let t = Tensor::matrix(node.rows, node.cols, g).expect("node shape is consistent");
                    entries.push((Var(idx), info.name.clone(), t));
                }
            }
        }
        Ok(Gradients { entries })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (m, n) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (_, k) = self.dims(*a);
                let bt = transpose(self.value(*b), k, n);
                gemm_acc(g, &bt, slot(grads, *a, m * k), m, n, k);
                gemm_tn_acc(self.value(*a), g, slot(grads, *b, k * n), m, k, n);
            }
            Op::Transpose(a) => {
                let gt = transpose(g, m, n);
                axpy(slot(grads, *a, m * n), &gt, 1.0);
            }
            Op::Add(a, b) => {
                axpy(slot(grads, *a, g.len()), g, 1.0);
                axpy(slot(grads, *b, g.len()), g, 1.0);
            }
            Op::Sub(a, b) => {
                axpy(slot(grads, *a, g.len()), g, 1.0);
                axpy(slot(grads, *b, g.len()), g, -1.0);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * vb[i];
                }
                let gb = slot(grads, *b, g.len());
                for i in 0..g.len() {
                    gb[i] += g[i] * va[i];
                }
            }
            Op::AddRow(x, row) => {
                axpy(slot(grads, *x, g.len()), g, 1.0);
                let gr = slot(grads, *row, n);
                for grow in g.chunks(n) {
                    axpy(gr, grow, 1.0);
                }
            }
            Op::Affine(x, scale) => axpy(slot(grads, *x, g.len()), g, *scale),
            Op::ScaleShift(x, c) => {
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * c[i];
                }
            }
            Op::Sum(x) => {
                let gx = slot(grads, *x, self.value(*x).len());
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }
            Op::Unary(x, f) => {
                let xv = self.value(*x);
                let yv = &node.value;
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    let d = match f {
                        Unary::Softplus => special::sigmoid(xv[i]),
                        Unary::Log => 1.0 / xv[i],
                        Unary::Sigmoid => yv[i] * (1.0 - yv[i]),
                        Unary::Gelu => special::gelu_grad(xv[i]),
                        Unary::Exp => yv[i],
                        Unary::Lgamma => special::digamma(xv[i]).expect("forward checked the domain"),
                    };
                    gx[i] += g[i] * d;
                }
            }
            Op::SoftmaxRows(x) => {
                let gx = slot(grads, *x, g.len());
                for r in 0..m {
                    let p = &node.value[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot = p.iter().zip(gr).fold(0.0, |a, (pi, gi)| a + pi * gi);
                    for j in 0..n {
                        gx[r * n + j] += p[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = self.value(*gain).to_vec();
                {
                    let gg = slot(grads, *gain, n);
                    for r in 0..m {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                {
                    let gb = slot(grads, *bias, n);
                    for grow in g.chunks(n) {
                        axpy(gb, grow, 1.0);
                    }
                }
                let gx = slot(grads, *x, m * n);
                let mut dxhat = vec![0.0; n];
                for r in 0..m {
                    let h = &xhat[r * n..(r + 1) * n];
                    for j in 0..n {
                        dxhat[j] = g[r * n + j] * gv[j];
                    }
                    let mean_d = dxhat.iter().fold(0.0, |a, v| a + v) / n as f64;
                    let mean_dh = dxhat.iter().zip(h).fold(0.0, |a, (d, hv)| a + d * hv) / n as f64;
                    for j in 0..n {
                        gx[r * n + j] += inv_std[r] * (dxhat[j] - mean_d - h[j] * mean_dh);
                    }
                }
            }
            Op::Attention { q, k, v, heads, segments, probs } => {
                let d = n;
                let dh = d / heads;
                let scale = 1.0 / special::sqrt(dh as f64);
                let mut dq = vec![0.0; m * d];
                let mut dk = vec![0.0; m * d];
                let mut dv = vec![0.0; m * d];
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut p_off = 0;
                for (start, nt) in segments.iter() {
                    for h in 0..*heads {
                        let qh = head_cols(qv, start, nt, d, h, dh);
                        let kh = head_cols(kv, start, nt, d, h, dh);
                        let vh = head_cols(vv, start, nt, d, h, dh);
                        let goh = head_cols(g, start, nt, d, h, dh);
                        let p = &probs[p_off..p_off + nt * nt];
                        p_off += nt * nt;
                        // dV = Pᵀ·dO
                        let mut dvh = vec![0.0; nt * dh];
                        gemm_tn_acc(p, &goh, &mut dvh, nt, nt, dh);
                        // dP = dO·Vᵀ
                        let vt = transpose(&vh, nt, dh);
                        let mut dp = vec![0.0; nt * nt];
                        gemm_acc(&goh, &vt, &mut dp, nt, dh, nt);
                        // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the 1/√dh scale
                        for r in 0..nt {
                            let pr = &p[r * nt..(r + 1) * nt];
                            let dpr = &mut dp[r * nt..(r + 1) * nt];
                            let dot = pr.iter().zip(dpr.iter()).fold(0.0, |a, (x, y)| a + x * y);
                            for j in 0..nt {
                                dpr[j] = pr[j] * (dpr[j] - dot) * scale;
                            }
                        }
                        let mut dqh = vec![0.0; nt * dh];
                        gemm_acc(&dp, &kh, &mut dqh, nt, nt, dh);
                        let mut dkh = vec![0.0; nt * dh];
                        gemm_tn_acc(&dp, &qh, &mut dkh, nt, nt, dh);
                        scatter_head_cols(&dqh, &mut dq, start, nt, d, h, dh);
                        scatter_head_cols(&dkh, &mut dk, start, nt, d, h, dh);
                        scatter_head_cols(&dvh, &mut dv, start, nt, d, h, dh);
                    }
                }
                axpy(slot(grads, *q, m * d), &dq, 1.0);
                axpy(slot(grads, *k, m * d), &dk, 1.0);
                axpy(slot(grads, *v, m * d), &dv, 1.0);
            }
            Op::SegmentSoftmax(x, segments) => {
                let gx = slot(grads, *x, m);
                for (start, len) in segments.iter() {
                    let p = &node.value[start..start + len];
                    let gr = &g[start..start + len];
                    let dot = p.iter().zip(gr).fold(0.0, |a, (pi, gi)| a + pi * gi);
                    for j in 0..len {
                        gx[start + j] += p[j] * (gr[j] - dot);
                    }
                }
            }
            Op::SegmentWeightedSum { w, h, segments } => {
                let d = n;
                let (wv, hv) = (self.value(*w), self.value(*h));
                let total = segments.total();
                {
                    let gw = slot(grads, *w, total);
                    for (i, (start, len)) in segments.iter().enumerate() {
                        let gi = &g[i * d..(i + 1) * d];
                        for r in start..start + len {
                            gw[r] += hv[r * d..(r + 1) * d].iter().zip(gi).fold(0.0, |a, (x, y)| a + x * y);
                        }
                    }
                }
                let gh = slot(grads, *h, total * d);
                for (i, (start, len)) in segments.iter().enumerate() {
                    let gi = &g[i * d..(i + 1) * d];
                    for r in start..start + len {
                        axpy(&mut gh[r * d..(r + 1) * d], gi, wv[r]);
                    }
                }
            }
            Op::SegmentSum(x, segments) => {
                let gx = slot(grads, *x, segments.total());
                for (i, (start, len)) in segments.iter().enumerate() {
                    for v in &mut gx[start..start + len] {
                        *v += g[i];
                    }
                }
            }
            Op::Periodic { freqs, x } => {
                let f = n / 2;
                let tau = 2.0 * core::f64::consts::PI;
                let c = self.value(*freqs).to_vec();
                let gc = slot(grads, *freqs, f);
                for (i, &xi) in x.iter().enumerate() {
                    let row = &g[i * n..(i + 1) * n];
                    for j in 0..f {
                        let theta = tau * c[j] * xi;
                        gc[j] += tau * xi * (row[j] * special::cos(theta) - row[f + j] * special::sin(theta));
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| if v > a { v } else { a });
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = special::exp(*v - max);
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn head_cols(src: &[f64], start: usize, n: usize, d: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * dh);
    for r in start..start + n {
        out.extend_from_slice(&src[r * d + h * dh..r * d + (h + 1) * dh]);
    }
    out
}

fn scatter_head_cols(src: &[f64], dst: &mut [f64], start: usize, n: usize, d: usize, h: usize, dh: usize) {
    for r in 0..n {
        let row = start + r;
        dst[row * d + h * dh..row * d + (h + 1) * dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}
