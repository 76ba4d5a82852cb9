//! Dense numeric kernel: matrices, products, row reductions, cosine
//! similarity, softmax, layer normalization, and a seedable generator.
//!
//! Storage is `f32`. Products, dot products and row statistics accumulate in
//! `f64` and round once on output.

mod matrix;
mod rng;

pub use matrix::Matrix;
pub use rng::Rng;

use crate::error::{AlgmError, Result};
use crate::exec;
use matrix::shape_pair;

/// Denominator floor for cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// `C = A·B` over strided `f64` operands, `C` row-major `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_f64(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
) -> Vec<f64> {
    let mut c = vec![0.0f64; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs view out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs view out of bounds");
    // SAFETY: the asserts above bound every element the views can address,
    // and `c` is a fresh m×n buffer with row stride n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn round_to_matrix(rows: usize, cols: usize, data: Vec<f64>) -> Matrix {
    Matrix::new(rows, cols, data.into_iter().map(|v| v as f32).collect())
        .expect("buffer sized by caller")
}

/// Matrix product `a·b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(shape_pair("matmul", a, b));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let c = gemm_f64(m, k, n, &a.to_f64(), k, 1, &b.to_f64(), n, 1);
    Ok(round_to_matrix(m, n, c))
}

/// Product with the second operand transposed: `a·bᵀ`.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(shape_pair("matmul_transposed", a, b));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let c = gemm_f64(m, k, n, &a.to_f64(), k, 1, &b.to_f64(), 1, k);
    Ok(round_to_matrix(m, n, c))
}

/// Affine map `x·w + bias`.
pub fn linear(x: &Matrix, w: &Matrix, bias: &[f32]) -> Result<Matrix> {
    let mut y = matmul(x, w)?;
    y.add_row_vector(bias)?;
    Ok(y)
}

pub(crate) fn dot_f64(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum()
}

pub(crate) fn norm_f64(u: &[f32]) -> f64 {
    dot_f64(u, u).sqrt()
}

#[inline]
fn cosine_from_parts(dot: f64, nu: f64, nv: f64, eps: f64) -> f32 {
    ((dot / (nu * nv).max(eps)) as f32).clamp(-1.0, 1.0)
}

/// Cosine similarity `u·v / max(‖u‖‖v‖, eps)`, clamped to `[-1, 1]`.
pub fn cosine_sim(u: &[f32], v: &[f32], eps: f64) -> Result<f32> {
    if u.len() != v.len() {
        return Err(AlgmError::Shape(format!(
            "cosine_sim: vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(AlgmError::Argument(format!("cosine_sim: eps must be positive, got {eps}")));
    }
    Ok(cosine_from_parts(dot_f64(u, v), norm_f64(u), norm_f64(v), eps))
}

/// Row norms in `f64`, reused across many cosine evaluations.
pub(crate) fn row_norms(t: &Matrix) -> Vec<f64> {
    t.row_iter().map(norm_f64).collect()
}

/// Cosine similarity of rows `i` and `j` given precomputed norms.
#[inline]
pub(crate) fn cosine_rows(t: &Matrix, norms: &[f64], i: usize, j: usize) -> f32 {
    cosine_from_parts(dot_f64(t.row(i), t.row(j)), norms[i], norms[j], COSINE_EPS)
}

/// [`cosine_rows`] without the final rounding to `f32`, for comparisons
/// that must not tie spuriously.
#[inline]
pub(crate) fn cosine_rows_f64(t: &Matrix, norms: &[f64], i: usize, j: usize) -> f64 {
    (dot_f64(t.row(i), t.row(j)) / (norms[i] * norms[j]).max(COSINE_EPS)).clamp(-1.0, 1.0)
}

/// All-pairs cosine similarity of the rows of `t` (N×N, symmetric).
pub fn pairwise_cosine(t: &Matrix) -> Matrix {
    let n = t.rows();
    let norms = row_norms(t);
    let rows: Vec<Vec<f32>> =
        exec::map_range(n, |i| (0..n).map(|j| cosine_rows(t, &norms, i, j)).collect());
    let mut out = Matrix::zeros(n, n);
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).copy_from_slice(&r);
    }
    // Entry (i, j) and (j, i) use the same operands in swapped order; f64 products
    // commute exactly, so the result is symmetric bit for bit.
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(t: &Matrix) -> Matrix {
    let mut out = t.clone();
    softmax_rows_in_place(&mut out);
    out
}

pub(crate) fn softmax_rows_in_place(t: &mut Matrix) {
    let cols = t.cols();
    if cols == 0 {
        return;
    }
    for row in t.data_mut().chunks_exact_mut(cols) {
        softmax_slice(row);
    }
}

pub(crate) fn softmax_slice(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    for (o, e) in row.iter_mut().zip(exps) {
        *o = (e / sum) as f32;
    }
}

/// Per-row layer normalization with population variance, then `gain·x + bias`.
pub fn layer_norm(t: &Matrix, gain: &[f32], bias: &[f32], eps: f64) -> Result<Matrix> {
    let d = t.cols();
    if gain.len() != d || bias.len() != d {
        return Err(AlgmError::Shape(format!(
            "layer_norm: gain/bias of length {}/{} for {d} columns",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = t.clone();
    if d == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_exact_mut(d) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gain).zip(bias) {
            *v = ((*v as f64 - mean) * inv * *g as f64 + *b as f64) as f32;
        }
    }
    Ok(out)
}

/// GELU, tanh approximation.
pub fn gelu(x: f32) -> f32 {
    let x = x as f64;
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    (0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())) as f32
}

pub(crate) fn gelu_in_place(t: &mut Matrix) {
    t.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
}

/// Arithmetic mean of the given rows, accumulated in `f64`.
pub(crate) fn mean_rows(t: &Matrix, idx: &[usize]) -> Vec<f32> {
    weighted_mean_rows(t, idx.iter().map(|&i| (i, 1.0)))
}

pub(crate) fn weighted_mean_rows(t: &Matrix, items: impl IntoIterator<Item = (usize, f64)>) -> Vec<f32> {
    let mut acc = vec![0.0f64; t.cols()];
    let mut total = 0.0f64;
    for (i, w) in items {
        total += w;
        for (a, &v) in acc.iter_mut().zip(t.row(i)) {
            *a += w * v as f64;
        }
    }
    acc.into_iter().map(|a| (a / total) as f32).collect()
}
