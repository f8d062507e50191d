//! Tensor kernels. These are the forward computations shared by the tape and
//! by callers that only need values.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Scalar, Tensor};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `c = a * b` for `a: [m x k]`, `b: [k x n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    mm_nn(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `c = a * b^T` for `a: [m x k]`, `b: [n x k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul_nt")?;
    let (n, k2) = b.dims2("matmul_nt")?;
    if k != k2 {
        return Err(Error::dim("matmul_nt", a.shape(), b.shape()));
    }
    let bt = transpose_data(b.data(), n, k);
    let mut out = vec![0.0; m * n];
    mm_nn(a.data(), &bt, &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `c = a^T * b` for `a: [k x m]`, `b: [k x n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2("matmul_tn")?;
    let (k2, n) = b.dims2("matmul_tn")?;
    if k != k2 {
        return Err(Error::dim("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for t in 0..k {
        let b_row = &bd[t * n..(t + 1) * n];
        let a_row = &ad[t * m..(t + 1) * m];
        for (i, &a_ti) in a_row.iter().enumerate() {
            let c_row = &mut out[i * n..(i + 1) * n];
            for (c, &b) in c_row.iter_mut().zip(b_row) {
                *c += a_ti * b;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2("transpose")?;
    Ok(Tensor::from_parts(vec![c, r], transpose_data(a.data(), r, c)))
}

fn transpose_data(data: &[Scalar], rows: usize, cols: usize) -> Vec<Scalar> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

/// Row-major `c += a * b`. Accumulates over the inner index in ascending
/// order for every output element; four rows of `a` share each pass over a
/// row of `b`.
fn mm_nn(a: &[Scalar], b: &[Scalar], c: &mut [Scalar], m: usize, k: usize, n: usize) {
    // Column blocks keep the touched part of `b` cache-resident for wide
    // outputs. Each output element still accumulates over `t` in ascending
    // order, so blocking does not change results.
    const COL_BLOCK: usize = 512;
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + COL_BLOCK).min(n);
        mm_nn_cols(a, b, c, m, k, n, j0..j1);
        j0 = j1;
    }
}

fn mm_nn_cols(a: &[Scalar], b: &[Scalar], c: &mut [Scalar], m: usize, k: usize, n: usize, cols: std::ops::Range<usize>) {
    let w = cols.len();
    let mut i = 0;
    while i + 4 <= m {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        let (c0, c1, c2, c3) = (
            &mut c0[cols.clone()],
            &mut c1[cols.clone()],
            &mut c2[cols.clone()],
            &mut c3[cols.clone()],
        );
        for t in 0..k {
            let b_row = &b[t * n + cols.start..t * n + cols.end];
            let a0 = a[i * k + t];
            let a1 = a[(i + 1) * k + t];
            let a2 = a[(i + 2) * k + t];
            let a3 = a[(i + 3) * k + t];
            for j in 0..w {
                let bj = b_row[j];
                c0[j] += a0 * bj;
                c1[j] += a1 * bj;
                c2[j] += a2 * bj;
                c3[j] += a3 * bj;
            }
        }
        i += 4;
    }
    for i in i..m {
        let c_row = &mut c[i * n + cols.start..i * n + cols.end];
        for t in 0..k {
            let a_it = a[i * k + t];
            let b_row = &b[t * n + cols.start..t * n + cols.end];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += a_it * bj;
            }
        }
    }
}

pub fn erf(x: Scalar) -> Scalar {
    libm::erf(x as f64) as Scalar
}

/// Exact GELU, `0.5 x (1 + erf(x / sqrt 2))`.
pub fn gelu_scalar(x: Scalar) -> Scalar {
    let x = x as f64;
    (0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))) as Scalar
}

/// `Phi(x) + x phi(x)`.
pub fn gelu_derivative(x: Scalar) -> Scalar {
    let x = x as f64;
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    (cdf + x * pdf) as Scalar
}

pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2("softmax_rows")?;
    let mut out = x.data().to_vec();
    for i in 0..m {
        softmax_in_place(&mut out[i * n..(i + 1) * n]);
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn softmax_in_place(row: &mut [Scalar]) {
    let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted-dropout keep mask: `0` for dropped elements, `1/(1-rate)` for survivors.
pub(crate) fn dropout_mask(len: usize, rate: f64, rng: &mut Rng) -> Vec<Scalar> {
    let keep = (1.0 / (1.0 - rate)) as Scalar;
    (0..len)
        .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
        .collect()
}

/// Inverted dropout. Identity when `training` is false or `rate` is zero.
pub fn dropout(x: &Tensor, rate: f64, rng: &mut Rng, training: bool) -> Result<Tensor> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), rate, rng);
    let data = x.data().iter().zip(&mask).map(|(v, k)| v * k).collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

pub(crate) fn check_indices(op: &'static str, indices: &[usize], bound: usize) -> Result<()> {
    match indices.iter().find(|&&i| i >= bound) {
        Some(&index) => Err(Error::Index { op, index, bound }),
        None => Ok(()),
    }
}

/// Copies `table` rows selected by `indices` into a fresh `[len x d]` tensor.
pub fn gather_rows(table: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let (k, d) = table.dims2("gather_rows")?;
    check_indices("gather_rows", indices, k)?;
    let mut out = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        out.extend_from_slice(table.row(i));
    }
    Ok(Tensor::from_parts(vec![indices.len(), d], out))
}

/// Mean over non-ignored rows of `-log softmax(logits_row)[target]`.
/// Returns the loss and the row-wise softmax (reused for the gradient).
pub(crate) fn cross_entropy_parts(
    logits: &Tensor,
    targets: &[usize],
    ignore: &HashSet<usize>,
) -> Result<(Scalar, Tensor, usize)> {
    let (m, v) = logits.dims2("cross_entropy_rows")?;
    if targets.len() != m {
        return Err(Error::dim("cross_entropy_rows", logits.shape(), &[targets.len()]));
    }
    let mut probs = logits.clone();
    let mut total = 0.0;
    let mut counted = 0usize;
    for (i, &t) in targets.iter().enumerate() {
        if ignore.contains(&i) {
            continue;
        }
        if t >= v {
            return Err(Error::Index {
                op: "cross_entropy_rows",
                index: t,
                bound: v,
            });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
        let log_z = row.iter().map(|&x| (x - max).exp()).sum::<Scalar>().ln() + max;
        total += log_z - row[t];
        counted += 1;
        softmax_in_place(probs.row_mut(i));
    }
    let loss = if counted == 0 { 0.0 } else { total / counted as Scalar };
    Ok((loss, probs, counted))
}

pub fn cross_entropy_rows(
    logits: &Tensor,
    targets: &[usize],
    ignore: &HashSet<usize>,
) -> Result<Scalar> {
    cross_entropy_parts(logits, targets, ignore).map(|(loss, _, _)| loss)
}
