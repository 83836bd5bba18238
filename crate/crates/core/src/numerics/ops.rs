//! Forward kernels on [`Tensor`] values.
//!
//! Every function here is pure. The computation record in [`super::Tape`]
//! calls the same kernels, so recorded and replayed values agree bit for bit.

use crate::error::{Error, Result};

use super::Tensor;

/// Splits `shape` around `axis` into `(outer, len, inner)` strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if shape.is_empty() {
        return Ok((1, 1, 1));
    }
    if axis >= shape.len() {
        return Err(Error::Shape(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Shape of a reduction along `axis`; reducing a vector yields a scalar.
pub(crate) fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out = shape.to_vec();
    if !out.is_empty() {
        out.remove(axis);
    }
    out
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major slices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    // op(a) is m×k, op(b) is k×n
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: slice lengths checked above match the stride layout described.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

fn finite(shape: Vec<usize>, data: Vec<f64>, what: &str) -> Result<Tensor> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} produced a non-finite value")));
    }
    Ok(Tensor::from_parts(shape, data))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!("matmul inner dims {k} vs {k2}")));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a.data(), false, b.data(), false, 0.0, &mut out);
    finite(vec![m, n], out, "matmul")
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!("matmul_nt inner dims {k} vs {k2}")));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a.data(), false, b.data(), true, 0.0, &mut out);
    finite(vec![m, n], out, "matmul_nt")
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    let src = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    finite(a.shape().to_vec(), data, "add")
}

/// Adds a length-`C` bias to every row of a `R×C` matrix.
pub fn add_row_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, c) = x.dims2()?;
    if bias.shape() != [c] {
        return Err(Error::Shape(format!(
            "bias shape {:?} does not match {c} columns",
            bias.shape()
        )));
    }
    let b = bias.data();
    let data = x
        .data()
        .chunks(c)
        .flat_map(|row| row.iter().zip(b).map(|(v, w)| v + w))
        .collect();
    finite(x.shape().to_vec(), data, "add_row_bias")
}

pub fn scale(x: &Tensor, factor: f64) -> Result<Tensor> {
    finite(
        x.shape().to_vec(),
        x.data().iter().map(|v| v * factor).collect(),
        "scale",
    )
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v.max(0.0)).collect())
}

pub fn exp(x: &Tensor) -> Result<Tensor> {
    finite(x.shape().to_vec(), x.data().iter().map(|v| v.exp()).collect(), "exp")
}

pub fn log(x: &Tensor) -> Result<Tensor> {
    if let Some(v) = x.data().iter().find(|&&v| v <= 0.0) {
        return Err(Error::Parameter(format!("log of non-positive value {v}")));
    }
    finite(x.shape().to_vec(), x.data().iter().map(|v| v.ln()).collect(), "log")
}

pub fn mean(x: &Tensor) -> Tensor {
    let m = x.data().iter().sum::<f64>() / x.len() as f64;
    Tensor::from_parts(Vec::new(), vec![m])
}

/// Temperature softmax along `axis`, stabilized by max subtraction.
pub fn softmax(x: &Tensor, axis: usize, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Parameter(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = ((src[idx(k)] - max) / temperature).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[idx(k)] /= total;
            }
        }
    }
    finite(x.shape().to_vec(), out, "softmax")
}

/// Checks that every slice along `axis` is a probability vector.
fn check_simplex(t: &Tensor, axis: usize, name: &str) -> Result<()> {
    let (outer, len, inner) = axis_split(t.shape(), axis)?;
    let d = t.data();
    for o in 0..outer {
        for i in 0..inner {
            let mut total = 0.0;
            for k in 0..len {
                let v = d[(o * len + k) * inner + i];
                if v < 0.0 {
                    return Err(Error::Parameter(format!("{name} has negative entry {v}")));
                }
                total += v;
            }
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Parameter(format!(
                    "{name} slice sums to {total}, expected 1"
                )));
            }
        }
    }
    Ok(())
}

/// `Σ p·ln(p/q)` along `axis`, with `0·ln 0 = 0`.
///
/// The result drops `axis` from the shape (a vector reduces to a scalar).
pub fn kl_divergence(p: &Tensor, q: &Tensor, axis: usize) -> Result<Tensor> {
    same_shape(p, q, "kl_divergence")?;
    check_simplex(p, axis, "p")?;
    check_simplex(q, axis, "q")?;
    kl_unchecked(p, q, axis)
}

/// KL without the simplex precondition check; used on the hot path where
/// `q` comes straight out of a softmax.
pub(crate) fn kl_unchecked(p: &Tensor, q: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(p.shape(), axis)?;
    let (pd, qd) = (p.data(), q.data());
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let mut acc = 0.0;
            for k in 0..len {
                let idx = (o * len + k) * inner + i;
                let (pv, qv) = (pd[idx], qd[idx]);
                if pv > 0.0 {
                    if qv <= 0.0 {
                        return Err(Error::Divergence { index: idx });
                    }
                    acc += pv * (pv / qv).ln();
                }
            }
            out[o * inner + i] = acc;
        }
    }
    finite(reduced_shape(p.shape(), axis), out, "kl_divergence")
}

/// Scales every slice along `axis` to unit Euclidean length.
pub fn l2_normalize(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let norm = (0..len).map(|k| src[idx(k)].powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Evaluation("cannot normalize a zero vector".into()));
            }
            for k in 0..len {
                out[idx(k)] = src[idx(k)] / norm;
            }
        }
    }
    finite(x.shape().to_vec(), out, "l2_normalize")
}

/// Euclidean norms of every slice along `axis`.
pub(crate) fn slice_norms(x: &Tensor, axis: usize) -> Result<Vec<f64>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            out[o * inner + i] = (0..len)
                .map(|k| src[(o * len + k) * inner + i].powi(2))
                .sum::<f64>()
                .sqrt();
        }
    }
    Ok(out)
}

/// Interprets `logits` as `B×K` rows (a vector is one row).
pub(crate) fn logit_rows(logits: &Tensor) -> Result<(usize, usize)> {
    match logits.shape() {
        &[k] => Ok((1, k)),
        &[b, k] => Ok((b, k)),
        s => Err(Error::Shape(format!("logits must be 1-D or 2-D, got {s:?}"))),
    }
}

/// `ln Σ exp(row)`, accurate when one entry dominates.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let (arg, max) = row
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, v)| (v - max).exp())
        .sum();
    max + rest.ln_1p()
}

/// Mean softmax cross-entropy of each logit row against its label.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (rows, classes) = logit_rows(logits)?;
    if labels.len() != rows {
        return Err(Error::Shape(format!("{rows} logit rows but {} labels", labels.len())));
    }
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Label { label, classes });
        }
        let row = &logits.data()[r * classes..(r + 1) * classes];
        total += log_sum_exp(row) - row[label];
    }
    Ok(total / rows as f64)
}

/// Applies an `N×N` operator to each consecutive `N`-row block of `x`.
///
/// `x` is `(G·N)×C`; block `g` is rows `g·N..(g+1)·N`. This is the per-frame
/// spatial aggregation of a graph convolution.
pub fn propagate(adjacency: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (n, n2) = adjacency.dims2()?;
    if n != n2 {
        return Err(Error::Shape(format!("adjacency must be square, got {n}×{n2}")));
    }
    let (rows, c) = x.dims2()?;
    if rows % n != 0 {
        return Err(Error::Shape(format!("{rows} rows is not a multiple of {n} joints")));
    }
    let mut out = vec![0.0; rows * c];
    for (xb, ob) in x.data().chunks(n * c).zip(out.chunks_mut(n * c)) {
        gemm(n, n, c, 1.0, adjacency.data(), false, xb, false, 0.0, ob);
    }
    finite(vec![rows, c], out, "propagate")
}

/// Row `g` of the output is the mean of the rows of `x` listed in `groups[g]`.
pub fn segment_mean(x: &Tensor, groups: &[Vec<usize>]) -> Result<Tensor> {
    let (rows, c) = x.dims2()?;
    let src = x.data();
    let mut out = vec![0.0; groups.len() * c];
    for (g, members) in groups.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Shape(format!("segment {g} is empty")));
        }
        let dst = &mut out[g * c..(g + 1) * c];
        for &r in members {
            if r >= rows {
                return Err(Error::Shape(format!("segment row {r} out of range {rows}")));
            }
            for (d, s) in dst.iter_mut().zip(&src[r * c..(r + 1) * c]) {
                *d += s;
            }
        }
        let inv = 1.0 / members.len() as f64;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    if groups.is_empty() {
        return Err(Error::Shape("no segments".into()));
    }
    finite(vec![groups.len(), c], out, "segment_mean")
}
