//! Dense row-major tensors and the forward kernels shared by the autodiff graph.

use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(Error::shape("tensor", format!("shape {shape:?} holds no values but {} were given", data.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[len / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        let c = self.last_dim();
        if c == 0 {
            0
        } else {
            self.data.len() / c
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        compensated_sum(self.data.iter().copied())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// In-place `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        if self.rank() < 2 {
            return Err(Error::shape("transpose", format!("rank {} < 2", self.rank())));
        }
        let r = self.rank();
        let (m, n) = (self.shape[r - 2], self.shape[r - 1]);
        let batch = self.data.len() / (m * n).max(1);
        let mut out = vec![0.0; self.data.len()];
        for b in 0..batch {
            let src = &self.data[b * m * n..(b + 1) * m * n];
            let dst = &mut out[b * m * n..(b + 1) * m * n];
            transpose_into(src, m, n, dst);
        }
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        Ok(Tensor { shape, data: out })
    }
}

pub(crate) fn transpose_into(src: &[f64], m: usize, n: usize, dst: &mut [f64]) {
    for i in 0..m {
        for j in 0..n {
            dst[j * m + i] = src[i * n + j];
        }
    }
}

const MR: usize = 4;
const NR: usize = 8;

/// `c[m,n] += A @ b[kk,n]` where `A[i,p] = a[i * si + p * sp]`. Each output
/// accumulates its products in ascending `p`, whatever the tiling.
fn gemm_strided(a: &[f64], si: usize, sp: usize, b: &[f64], c: &mut [f64], m: usize, kk: usize, n: usize) {
    if m == 0 || n == 0 {
        return;
    }
    let mut pack = vec![0.0; kk * MR];
    let mut i0 = 0;
    while i0 < m {
        let mr = MR.min(m - i0);
        if mr == MR {
            for (p, dst) in pack.chunks_exact_mut(MR).enumerate() {
                for (r, d) in dst.iter_mut().enumerate() {
                    *d = a[(i0 + r) * si + p * sp];
                }
            }
        }
        let mut j0 = 0;
        while j0 < n {
            let nr = NR.min(n - j0);
            if mr == MR && nr == NR {
                let mut acc = [[0.0; NR]; MR];
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
                }
                for (av, brow) in pack.chunks_exact(MR).zip(b.chunks_exact(n)) {
                    let brow: &[f64; NR] = brow[j0..j0 + NR].try_into().expect("tile");
                    for (row, &x) in acc.iter_mut().zip(av) {
                        for (y, &bv) in row.iter_mut().zip(brow) {
                            *y += x * bv;
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
                }
            } else {
                for r in 0..mr {
                    let i = i0 + r;
                    for p in 0..kk {
                        let av = a[i * si + p * sp];
                        let brow = &b[p * n + j0..p * n + j0 + nr];
                        for (x, &bv) in c[i * n + j0..i * n + j0 + nr].iter_mut().zip(brow) {
                            *x += av * bv;
                        }
                    }
                }
            }
            j0 += nr;
        }
        i0 += mr;
    }
}

/// `c[m,n] += a[m,k] @ b[k,n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(a, k, 1, b, c, m, k, n);
}

/// `c[m,n] += a[m,k] @ b[n,k]^T`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let mut bt = vec![0.0; k * n];
    transpose_into(b, n, k, &mut bt);
    gemm_nn(a, &bt, c, m, k, n);
}

/// `c[k,n] += a[m,k]^T @ b[m,n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(a, 1, k, b, c, k, m, n);
}

/// Batch layout of a matmul: the batch dims of each side and the broadcast result.
#[derive(Debug, Clone)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", format!("operands need rank >= 2, got {a:?} and {b:?}")));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions differ: {a:?} @ {b:?} ({k} != {k2})"),
        ));
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let a_n: usize = a_batch.iter().product();
    let b_n: usize = b_batch.iter().product();
    let batch_shape: Vec<usize> = if a_batch == b_batch {
        a_batch.to_vec()
    } else if b_n == 1 {
        a_batch.to_vec()
    } else if a_n == 1 {
        b_batch.to_vec()
    } else {
        return Err(Error::shape(
            "matmul",
            format!("batch dimensions not broadcastable: {a:?} @ {b:?}"),
        ));
    };
    let batch = batch_shape.iter().product();
    let mut out_shape = batch_shape;
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulDims { batch, a_batched: a_n > 1, b_batched: b_n > 1, m, k, n, out_shape })
}

/// Matrix product over the last two axes with batch broadcasting (a batch side of
/// size one is shared across the other side's batch).
/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![0.0; d.batch * d.m * d.n];
    for bi in 0..d.batch {
        let ao = if d.a_batched { bi * d.m * d.k } else { 0 };
        let bo = if d.b_batched { bi * d.k * d.n } else { 0 };
        gemm_nn(
            &a.data[ao..ao + d.m * d.k],
            &b.data[bo..bo + d.k * d.n],
            &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n],
            d.m,
            d.k,
            d.n,
        );
    }
    Tensor::new(d.out_shape, out)
}

/// Strides describing a reduction along `axis`: (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape("axis", format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis` (max subtraction).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(Error::NonFinite { context: "softmax input".into() });
    }
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(out[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (out[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                out[base + j * inner] /= sum;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Layer normalization over the last axis: `gain * (x - mean) / sqrt(var + eps) + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.last_dim();
    if gain.len() != c || bias.len() != c {
        return Err(Error::shape(
            "layer_norm",
            format!("gain/bias of length {}/{} for rows of {c}", gain.len(), bias.len()),
        ));
    }
    let mut out = vec![0.0; x.len()];
    for r in 0..x.rows() {
        let row = x.row(r);
        let (mean, rstd) = row_stats(row, eps);
        let dst = &mut out[r * c..(r + 1) * c];
        for j in 0..c {
            dst[j] = gain.data[j] * (row[j] - mean) * rstd + bias.data[j];
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Mean and reciprocal standard deviation (population variance) of one row.
pub(crate) fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Standard normal CDF via the exact error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// GELU in its exact form `x * Phi(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| v * normal_cdf(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let i = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap(), b);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_descriptive() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("inner dimensions"), "{err}");
    }

    #[test]
    fn batched_matmul_broadcasts_shared_rhs() {
        let a = Tensor::new([2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::new([3], vec![1.0; 3]).unwrap(), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&Tensor::new([2], vec![0.0, 3f64.ln()]).unwrap(), 0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
        let s = softmax(&Tensor::new([2], vec![1000.0, 1000.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::new([2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(softmax(&x, 0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn layer_norm_cases() {
        let one = Tensor::full([2], 1.0);
        let zero = Tensor::zeros([2]);
        let c = Tensor::full([1, 2], 5.0);
        assert_eq!(layer_norm(&c, &one, &zero, 1e-5).unwrap().data(), &[0.0, 0.0]);
        let x = Tensor::from_rows(&[vec![1.0, 3.0]]).unwrap();
        let y = layer_norm(&x, &one, &zero, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
        let b = Tensor::new([2], vec![0.3, -0.7]).unwrap();
        let y = layer_norm(&c, &one, &b, 1e-5).unwrap();
        assert_eq!(y.data(), b.data());
    }

    #[test]
    fn gelu_values() {
        let y = gelu(&Tensor::new([3], vec![0.0, 1.0, 12.0]).unwrap());
        assert_eq!(y.data()[0], 0.0);
        // Phi(1) = 0.841344746...
        assert!((y.data()[1] - 0.841_344_746_068_543).abs() < 1e-12);
        assert!((y.data()[2] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn transpose_roundtrip() {
        let x = Tensor::new([2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        let t = x.transpose_last2().unwrap();
        assert_eq!(t.shape(), &[2, 3, 2]);
        assert_eq!(t.transpose_last2().unwrap(), x);
    }
}
