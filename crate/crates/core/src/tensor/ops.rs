//! Forward kernels shared by the autodiff graph and plain tensor math.
//!
//! All kernels are pure functions over row-major buffers. Reductions that feed
//! losses or statistics accumulate in f64 regardless of the element type.

use crate::error::{Error, Result};
use crate::tensor::{lit, numel, strides_of, Scalar, Tensor};

fn shape_err<T>(op: &str, detail: String) -> Result<T> {
    Err(Error::Shape(format!("{op}: {detail}")))
}

/// Elementwise sum of two same-shape tensors.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return shape_err("add", format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

/// Adds `b` to `a` where `b`'s shape is a trailing suffix of `a`'s shape
/// (e.g. a positional-encoding table added across a batch axis).
pub fn add_suffix_broadcast<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if b.rank() > a.rank() || a.shape()[a.rank() - b.rank()..] != *b.shape() {
        return shape_err(
            "add_broadcast",
            format!("{:?} is not a suffix of {:?}", b.shape(), a.shape()),
        );
    }
    let period = b.len().max(1);
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| x + b.data()[i % period])
        .collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

/// Elementwise product of two same-shape tensors.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return shape_err("mul", format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

/// Multiplies every element by a scalar factor.
pub fn scale<T: Scalar>(a: &Tensor<T>, factor: T) -> Tensor<T> {
    let data = a.data().iter().map(|&x| x * factor).collect();
    Tensor::from_vec(a.shape().to_vec(), data).expect("shape unchanged")
}

pub(crate) fn matmul_2d_into<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

pub(crate) fn transpose_2d<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Matrix product in two forms sharing one contract:
///
/// * `b` rank 2: `a (..., N, K) x b (K, D) -> (..., N, D)` — the leading axes
///   of `a` are flattened, multiplied, and reshaped back.
/// * `a` and `b` of equal rank > 2 with identical leading axes:
///   batched `(..., N, K) x (..., K, D) -> (..., N, D)`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() < 2 || b.rank() < 2 {
        return shape_err(
            "matmul",
            format!(
                "operands must be rank >= 2, got {:?} x {:?}",
                a.shape(),
                b.shape()
            ),
        );
    }
    let k = a.shape()[a.rank() - 1];
    if b.rank() == 2 {
        if b.shape()[0] != k {
            return shape_err(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?}", a.shape(), b.shape()),
            );
        }
        let d = b.shape()[1];
        let rows = a.len() / k.max(1);
        let mut out = vec![T::zero(); rows * d];
        matmul_2d_into(a.data(), b.data(), rows, k, d, &mut out);
        let mut out_shape = a.shape().to_vec();
        *out_shape.last_mut().expect("rank >= 2") = d;
        return Tensor::from_vec(out_shape, out);
    }
    if b.rank() == a.rank()
        && a.shape()[..a.rank() - 2] == b.shape()[..b.rank() - 2]
        && b.shape()[b.rank() - 2] == k
    {
        let n = a.shape()[a.rank() - 2];
        let d = b.shape()[b.rank() - 1];
        let batches = numel(&a.shape()[..a.rank() - 2]);
        let mut out = vec![T::zero(); batches * n * d];
        for i in 0..batches {
            matmul_2d_into(
                &a.data()[i * n * k..(i + 1) * n * k],
                &b.data()[i * k * d..(i + 1) * k * d],
                n,
                k,
                d,
                &mut out[i * n * d..(i + 1) * n * d],
            );
        }
        let mut out_shape = a.shape().to_vec();
        let rank = out_shape.len();
        out_shape[rank - 1] = d;
        return Tensor::from_vec(out_shape, out);
    }
    shape_err(
        "matmul",
        format!(
            "incompatible operand shapes: {:?} x {:?}",
            a.shape(),
            b.shape()
        ),
    )
}

/// Reorders axes; `perm` must be a permutation of `0..rank`.
pub fn permute<T: Scalar>(a: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = a.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank
        || perm
            .iter()
            .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
    {
        return shape_err(
            "permute",
            format!(
                "{perm:?} is not a permutation of axes for shape {:?}",
                a.shape()
            ),
        );
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| a.shape()[p]).collect();
    let in_strides = strides_of(a.shape());
    let out_strides = strides_of(&out_shape);
    let mut out = vec![T::zero(); a.len()];
    for (linear, slot) in out.iter_mut().enumerate() {
        let mut rem = linear;
        let mut src = 0usize;
        for (axis, &stride) in out_strides.iter().enumerate() {
            let coord = rem / stride;
            rem %= stride;
            src += coord * in_strides[perm[axis]];
        }
        *slot = a.data()[src];
    }
    Tensor::from_vec(out_shape, out)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Contiguous sub-tensor along one axis.
pub fn narrow<T: Scalar>(
    a: &Tensor<T>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<T>> {
    if axis >= a.rank() {
        return shape_err(
            "narrow",
            format!("axis {axis} out of range for {:?}", a.shape()),
        );
    }
    let dim = a.shape()[axis];
    if len == 0 || start + len > dim {
        return shape_err(
            "narrow",
            format!(
                "range {start}..{} out of bounds for axis {axis} of size {dim}",
                start + len
            ),
        );
    }
    let outer = numel(&a.shape()[..axis]);
    let inner = numel(&a.shape()[axis + 1..]);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * dim + start) * inner;
        out.extend_from_slice(&a.data()[base..base + len * inner]);
    }
    let mut out_shape = a.shape().to_vec();
    out_shape[axis] = len;
    Tensor::from_vec(out_shape, out)
}

/// Adds `src` into the `start..start+len` slice of `dst` along `axis`.
/// Used by the backward pass of `narrow`.
pub(crate) fn add_into_narrowed<T: Scalar>(
    dst: &mut [T],
    dst_shape: &[usize],
    axis: usize,
    start: usize,
    src: &Tensor<T>,
) {
    let dim = dst_shape[axis];
    let len = src.shape()[axis];
    let outer = numel(&dst_shape[..axis]);
    let inner = numel(&dst_shape[axis + 1..]);
    for o in 0..outer {
        let dst_base = (o * dim + start) * inner;
        let src_base = o * len * inner;
        for j in 0..len * inner {
            dst[dst_base + j] = dst[dst_base + j] + src.data()[src_base + j];
        }
    }
}

/// Concatenation along an axis; all parts must agree on every other axis.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = match parts.first() {
        Some(t) => t,
        None => return shape_err("concat", "expects at least one tensor".to_string()),
    };
    let rank = first.rank();
    if axis >= rank {
        return shape_err(
            "concat",
            format!("axis {axis} out of range for rank {rank}"),
        );
    }
    let mut axis_total = 0usize;
    for part in parts {
        if part.rank() != rank
            || part.shape()[..axis] != first.shape()[..axis]
            || part.shape()[axis + 1..] != first.shape()[axis + 1..]
        {
            return shape_err(
                "concat",
                format!(
                    "{:?} does not match {:?} outside axis {axis}",
                    part.shape(),
                    first.shape()
                ),
            );
        }
        axis_total += part.shape()[axis];
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = axis_total;
    let outer = numel(&out_shape[..axis]);
    let inner = numel(&out_shape[axis + 1..]);
    let mut out = Vec::with_capacity(numel(&out_shape));
    for o in 0..outer {
        for part in parts {
            let span = part.shape()[axis] * inner;
            out.extend_from_slice(&part.data()[o * span..(o + 1) * span]);
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Numerically stable softmax over the last axis (max-subtracted).
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() == 0 || x.is_empty() {
        return shape_err("softmax", "expects a non-empty tensor".to_string());
    }
    let row = x.shape()[x.rank() - 1];
    let mut out = vec![T::zero(); x.len()];
    for (chunk_out, chunk_in) in out.chunks_mut(row).zip(x.data().chunks(row)) {
        let max = chunk_in.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, &v) in chunk_out.iter_mut().zip(chunk_in) {
            let e = (v - max).exp();
            *o = e;
            sum = sum + e;
        }
        for o in chunk_out.iter_mut() {
            *o = *o / sum;
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

/// Exact GELU `x * Phi(x)` in its erf form.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let half = lit::<T>(0.5);
    let inv_sqrt2 = lit::<T>(std::f64::consts::FRAC_1_SQRT_2);
    let data = x
        .data()
        .iter()
        .map(|&v| half * v * (T::one() + (v * inv_sqrt2).erf()))
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data).expect("shape unchanged")
}

/// Derivative of the exact GELU: `Phi(x) + x * phi(x)`.
pub(crate) fn gelu_derivative<T: Scalar>(v: T) -> T {
    let half = lit::<T>(0.5);
    let inv_sqrt2 = lit::<T>(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = lit::<T>(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let cdf = half * (T::one() + (v * inv_sqrt2).erf());
    let pdf = inv_sqrt_2pi * (-(v * v) * half).exp();
    cdf + v * pdf
}

/// Saved forward context for batch normalization over the last (feature) axis.
pub struct BatchNormForward<T> {
    pub output: Tensor<T>,
    /// Normalized input, saved for the backward pass.
    pub xhat: Vec<T>,
    /// Per-feature `1 / sqrt(var + eps)`.
    pub inv_std: Vec<T>,
}

/// Training-mode batch normalization. Statistics are pooled over every axis
/// except the last; variance is the population (biased) estimate. Returns the
/// batch statistics so callers can update running averages.
#[allow(clippy::type_complexity)]
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(BatchNormForward<T>, Vec<T>, Vec<T>)> {
    let features = batchnorm_feature_dim(x, gamma, beta)?;
    let rows = x.len() / features;
    let mut mean = vec![0f64; features];
    let mut var = vec![0f64; features];
    for chunk in x.data().chunks(features) {
        for (m, &v) in mean.iter_mut().zip(chunk) {
            *m += v.to_f64().expect("finite");
        }
    }
    for m in mean.iter_mut() {
        *m /= rows as f64;
    }
    for chunk in x.data().chunks(features) {
        for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(chunk) {
            let d = v.to_f64().expect("finite") - m;
            *s += d * d;
        }
    }
    for s in var.iter_mut() {
        *s /= rows as f64;
    }
    let mean_t: Vec<T> = mean.iter().map(|&m| lit(m)).collect();
    let var_t: Vec<T> = var.iter().map(|&s| lit(s)).collect();
    let inv_std: Vec<T> = var_t.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
    let fwd = batchnorm_normalize(x, gamma, beta, &mean_t, &inv_std)?;
    Ok((fwd, mean_t, var_t))
}

/// Inference-mode batch normalization using externally tracked running stats.
pub fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Result<BatchNormForward<T>> {
    let features = batchnorm_feature_dim(x, gamma, beta)?;
    if running_mean.len() != features || running_var.len() != features {
        return shape_err(
            "batchnorm",
            format!(
                "running stats of length {}/{} do not match feature dim {features}",
                running_mean.len(),
                running_var.len()
            ),
        );
    }
    let inv_std: Vec<T> = running_var
        .iter()
        .map(|&s| T::one() / (s + eps).sqrt())
        .collect();
    batchnorm_normalize(x, gamma, beta, running_mean, &inv_std)
}

fn batchnorm_feature_dim<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> Result<usize> {
    if x.rank() == 0 || x.is_empty() {
        return shape_err("batchnorm", "expects a non-empty tensor".to_string());
    }
    let features = x.shape()[x.rank() - 1];
    if gamma.len() != features || beta.len() != features {
        return shape_err(
            "batchnorm",
            format!(
                "gamma/beta of length {}/{} do not match feature dim {features}",
                gamma.len(),
                beta.len()
            ),
        );
    }
    Ok(features)
}

fn batchnorm_normalize<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    inv_std: &[T],
) -> Result<BatchNormForward<T>> {
    let features = gamma.len();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for (row, (xhat_row, out_row)) in x
        .data()
        .chunks(features)
        .zip(xhat.chunks_mut(features).zip(out.chunks_mut(features)))
    {
        for j in 0..features {
            let h = (row[j] - mean[j]) * inv_std[j];
            xhat_row[j] = h;
            out_row[j] = gamma[j] * h + beta[j];
        }
    }
    Ok(BatchNormForward {
        output: Tensor::from_vec(x.shape().to_vec(), out)?,
        xhat,
        inv_std: inv_std.to_vec(),
    })
}

/// Sum of squared differences over all elements, accumulated in f64.
pub fn sum_squared_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return shape_err(
            "sum_squared_error",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        );
    }
    let mut acc = 0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = (x - y).to_f64().expect("finite");
        acc += d * d;
    }
    Ok(lit(acc))
}

/// Sum over all elements, accumulated in f64.
pub fn sum_all<T: Scalar>(a: &Tensor<T>) -> T {
    let mut acc = 0f64;
    for &x in a.data() {
        acc += x.to_f64().expect("finite");
    }
    lit(acc)
}
