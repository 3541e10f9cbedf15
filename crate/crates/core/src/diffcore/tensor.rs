use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Dense row-major `f64` tensor. Rank is at most 2 in practice, vectors are
/// stored as `[n]` and scalars as `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("tensor", format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel], requires_grad: false }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("tensor", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(rows, cols)` viewing rank-1 tensors as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => (other[..other.len() - 1].iter().product(), other[other.len() - 1]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

const MR: usize = 4;
const NR: usize = 8;

/// `C[i][j] += Σ_t A(i, t)·B[t][j]` where `A(i, t) = a[i·a_rs + t·a_cs]` and
/// `B` is row-major `k×n`. Each output sums its `k` terms left to right in a
/// register block and is then added to `C` once.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(a: &[f64], a_rs: usize, a_cs: usize, b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let full_rows = m - m % MR;
    let full_cols = n - n % NR;
    let mut i = 0;
    while i < full_rows {
        let mut j = 0;
        while j < full_cols {
            let mut acc = [[0.0f64; NR]; MR];
            for t in 0..k {
                let brow: [f64; NR] = b[t * n + j..t * n + j + NR].try_into().unwrap();
                let mut av = [0.0f64; MR];
                for (r, slot) in av.iter_mut().enumerate() {
                    *slot = a[(i + r) * a_rs + t * a_cs];
                }
                for r in 0..MR {
                    for q in 0..NR {
                        acc[r][q] += av[r] * brow[q];
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                let crow = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                for q in 0..NR {
                    crow[q] += acc_r[q];
                }
            }
            j += NR;
        }
        for r in i..i + MR {
            gemm_edge(a, a_rs, a_cs, b, c, r, k, n, full_cols);
        }
        i += MR;
    }
    for r in full_rows..m {
        gemm_edge(a, a_rs, a_cs, b, c, r, k, n, 0);
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm_edge(a: &[f64], a_rs: usize, a_cs: usize, b: &[f64], c: &mut [f64], row: usize, k: usize, n: usize, from_col: usize) {
    for j in from_col..n {
        let mut s = 0.0;
        for t in 0..k {
            s += a[row * a_rs + t * a_cs] * b[t * n + j];
        }
        c[row * n + j] += s;
    }
}

/// `C += A·B` for row-major `A: m×k`, `B: k×n`.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(a, k, 1, b, c, m, k, n);
}

/// `C += Aᵀ·B` for `A: k×m`, `B: k×n`, `C: m×n`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    gemm_strided(a, 1, m, b, c, m, k, n);
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Plain matrix product outside any tape.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if k != k2 {
        return Err(Error::dim("matmul", format!("{m}x{k} · {k2}x{n}")));
    }
    let mut out = vec![0.0; m * n];
    gemm_acc(&a.data, &b.data, &mut out, m, k, n);
    Tensor::matrix(m, n, out)
}
