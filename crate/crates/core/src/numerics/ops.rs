//! Forward kernels shared by the autodiff tape and the plain tensor API.

use super::params::Parameter;
use super::tensor::Tensor;
use crate::error::{OreoError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Splits `shape` around `axis` into (outer, extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len().max(1) {
        return Err(OreoError::shape(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    if shape.is_empty() {
        return Ok((1, 1, 1));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// `c = a · b` (+ `c` when `accumulate`), with arbitrary strides so transposes are free.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose extents cover the strided index ranges.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of `[m,k]` and `[k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(OreoError::shape(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        a.data(),
        k as isize,
        1,
        b.data(),
        n as isize,
        1,
        &mut out,
        false,
    );
    Tensor::matrix(m, n, out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Log-sum-exp of a row, max-shifted.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, extent, inner) = axis_split(x.shape(), axis)?;
    if extent == 0 {
        return Err(OreoError::shape("softmax over an empty axis"));
    }
    let mut out = x.clone();
    let data = out.data_mut();
    let mut buf = vec![0.0; extent];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * extent * inner + j * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = data[at(j)];
            }
            softmax_in_place(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                data[at(j)] = *b;
            }
        }
    }
    Ok(out)
}

/// Row statistics kept for the layer-norm adjoint.
pub(crate) struct NormStats {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_rows(x: &Tensor, gain: &[f64], bias: &[f64], eps: f64) -> Result<(Tensor, NormStats)> {
    let c = x.cols();
    if c == 0 || gain.len() != c || bias.len() != c {
        return Err(OreoError::shape(format!(
            "layer_norm over width {c} with gain {} and bias {}",
            gain.len(),
            bias.len()
        )));
    }
    let rows = x.rows();
    let mut out = vec![0.0; rows * c];
    let mut xhat = vec![0.0; rows * c];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let s = 1.0 / (var + eps).sqrt();
        rstd[r] = s;
        for j in 0..c {
            let h = (row[j] - mean) * s;
            xhat[r * c + j] = h;
            out[r * c + j] = h * gain[j] + bias[j];
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, NormStats { xhat, rstd }))
}

/// Layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gain: &Parameter, bias: &Parameter, eps: f64) -> Result<Tensor> {
    layer_norm_rows(x, gain.value.data(), bias.value.data(), eps).map(|(t, _)| t)
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn add_row_bias(x: &mut Tensor, bias: &[f64]) -> Result<()> {
    if x.cols() != bias.len() {
        return Err(OreoError::shape("bias width mismatch"));
    }
    for r in 0..x.rows() {
        for (v, b) in x.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(())
}

/// `W2 · relu(W1 · x + b1) + b2`, applied to each row of `x` (row-vector convention).
pub fn mlp_project(x: &Tensor, w1: &Parameter, b1: &Parameter, w2: &Parameter, b2: &Parameter) -> Result<Tensor> {
    let as_matrix = |t: &Tensor| -> Result<Tensor> {
        if t.rank() == 1 {
            t.clone().reshape(vec![1, t.len()])
        } else {
            Ok(t.clone())
        }
    };
    let xm = as_matrix(x)?;
    let mut h = matmul(&xm, &w1.value)?;
    add_row_bias(&mut h, b1.value.data())?;
    let h = h.map(|v| v.max(0.0));
    let mut out = matmul(&h, &w2.value)?;
    add_row_bias(&mut out, b2.value.data())?;
    if x.rank() == 1 {
        let n = out.len();
        out = out.reshape(vec![n])?;
    }
    Ok(out)
}

/// `out[.., j, ..] = Σ_{k : idx[k] = j} src[.., k, ..]`, summed in ascending `k`.
pub fn scatter_add(src: &Tensor, idx: &[usize], out_extent: usize, axis: usize) -> Result<Tensor> {
    let (outer, extent, inner) = axis_split(src.shape(), axis)?;
    if idx.len() != extent {
        return Err(OreoError::shape(format!(
            "scatter_add: {} indices for extent {extent}",
            idx.len()
        )));
    }
    if let Some(&bad) = idx.iter().find(|&&j| j >= out_extent) {
        return Err(OreoError::Index {
            index: bad,
            extent: out_extent,
        });
    }
    let mut shape = src.shape().to_vec();
    if shape.is_empty() {
        shape.push(1);
    }
    shape[axis] = out_extent;
    let mut out = Tensor::zeros(&shape);
    let data = out.data_mut();
    let s = src.data();
    for o in 0..outer {
        for (k, &j) in idx.iter().enumerate() {
            for i in 0..inner {
                data[o * out_extent * inner + j * inner + i] += s[o * extent * inner + k * inner + i];
            }
        }
    }
    Ok(out)
}

/// Divides each fibre along `axis` by its sum. Fibres summing to zero are
/// replaced by the matching fibre of `fallback`.
pub fn l1_normalize(x: &Tensor, axis: usize, fallback: &Tensor) -> Result<Tensor> {
    if fallback.shape() != x.shape() {
        return Err(OreoError::shape(format!(
            "fallback shape {:?} differs from {:?}",
            fallback.shape(),
            x.shape()
        )));
    }
    if let Some(v) = x.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(OreoError::Domain(format!(
            "l1_normalize needs nonnegative input, found {v}"
        )));
    }
    let (outer, extent, inner) = axis_split(x.shape(), axis)?;
    let mut out = x.clone();
    let data = out.data_mut();
    let fb = fallback.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * extent * inner + j * inner + i;
            let total: f64 = (0..extent).map(|j| data[at(j)]).sum();
            for j in 0..extent {
                let p = at(j);
                data[p] = if total > 0.0 { data[p] / total } else { fb[p] };
            }
        }
    }
    Ok(out)
}
