//! Dense row-major `f64` tensors and their forward kernels.
//!
//! The kernels here are plain functions over [`Tensor`] values. The tape in
//! [`crate::autograd`] calls the same kernels on its forward pass and pairs
//! each one with an explicit backward rule.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Gradient slot, same length as `data` when present.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::shape("ragged rows"));
        }
        Tensor::new(vec![n_rows, n_cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns when viewed as a matrix: the last axis is the column
    /// axis and all leading axes are folded into rows.
    pub fn matrix_dims(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("tensor has at least one axis");
        (self.data.len() / cols, cols)
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, cols) = self.matrix_dims();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Serializes as `AGET`, u32 rank, u64 dims, f64 payload (little-endian).
    pub fn write_binary<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.binary_len());
        self.write_binary(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn binary_len(&self) -> usize {
        4 + 4 + 8 * self.shape.len() + 8 * self.data.len()
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::shape(format!("bad tensor magic {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        read_exact(r, &mut b4)?;
        let rank = u32::from_le_bytes(b4) as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::shape(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut b8 = [0u8; 8];
        for _ in 0..rank {
            read_exact(r, &mut b8)?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && n < (1 << 32))
            .ok_or_else(|| Error::shape(format!("implausible tensor shape {shape:?}")))?;
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            read_exact(r, &mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        Tensor::new(shape, data)
    }
}

const MAGIC: &[u8; 4] = b"AGET";

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::shape("tensor payload truncated")
        } else {
            Error::shape(format!("tensor read failed: {e}"))
        }
    })
}

/// `c = op(a) · op(b) + beta · c` over row-major buffers, where `op`
/// optionally transposes. `op(a)` is `m x k`, `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: buffer lengths match the strides computed above.
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

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matmul(a.shape(), b.shape(), false)?;
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, false, &b.data, false, 0.0, &mut out);
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matmul(a.shape(), b.shape(), true)?;
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, false, &b.data, true, 0.0, &mut out);
    Tensor::new(vec![m, n], out)
}

pub(crate) fn check_matmul(a: &[usize], b: &[usize], b_transposed: bool) -> Result<()> {
    let inner_b = if b_transposed { b.get(1) } else { b.first() };
    if a.len() != 2 || b.len() != 2 || Some(&a[1]) != inner_b {
        let op = if b_transposed { "a·bᵀ" } else { "a·b" };
        return Err(Error::shape(format!(
            "matmul {op}: incompatible shapes {a:?} and {b:?}"
        )));
    }
    Ok(())
}

/// Softmax along `axis`, stabilized by subtracting the slice maximum.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::shape(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape
        )));
    }
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.data.clone();
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = x.data[base + j * inner];
            }
            softmax_in_place(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                out[base + j * inner] = *b;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
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

/// Per-row normalization statistics kept for the backward pass.
pub(crate) struct NormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_with_stats(
    x: &[f64],
    cols: usize,
    gain: &[f64],
    bias: &[f64],
) -> (Vec<f64>, NormStats) {
    let rows = x.len() / cols;
    let mut out = vec![0.0; x.len()];
    let mut stats = NormStats {
        mean: Vec::with_capacity(rows),
        rstd: Vec::with_capacity(rows),
    };
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for c in 0..cols {
            out[r * cols + c] = (row[c] - mean) * rstd * gain[c] + bias[c];
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    (out, stats)
}

/// Layer normalization over the last axis with affine `gain` and `bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, cols) = x.matrix_dims();
    if gain.numel() != cols || bias.numel() != cols {
        return Err(Error::shape(format!(
            "layer_norm: last axis {cols} vs gain {:?} / bias {:?}",
            gain.shape, bias.shape
        )));
    }
    let (out, _) = layer_norm_with_stats(&x.data, cols, &gain.data, &bias.data);
    Tensor::new(x.shape.clone(), out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// Tanh-approximated GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
        grad: None,
    }
}

/// Mean negative log-likelihood over the positions where `include` is set.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], include: &[bool]) -> Result<Tensor> {
    let (loss, _) = cross_entropy_with_probs(logits, targets, include)?;
    Ok(Tensor::scalar(loss))
}

pub(crate) fn cross_entropy_with_probs(
    logits: &Tensor,
    targets: &[usize],
    include: &[bool],
) -> Result<(f64, Vec<f64>)> {
    if logits.rank() != 2 {
        return Err(Error::shape(format!(
            "cross_entropy expects [T×V] logits, got {:?}",
            logits.shape
        )));
    }
    let (rows, vocab) = (logits.shape[0], logits.shape[1]);
    if targets.len() != rows || include.len() != rows {
        return Err(Error::shape(format!(
            "cross_entropy: {rows} rows but {} targets / {} mask entries",
            targets.len(),
            include.len()
        )));
    }
    let count = include.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyLossSupport);
    }
    let mut probs = logits.data.clone();
    let mut total = 0.0;
    for r in 0..rows {
        let row = &mut probs[r * vocab..(r + 1) * vocab];
        softmax_in_place(row);
        if include[r] {
            let t = targets[r];
            if t >= vocab {
                return Err(Error::TargetOutOfRange { target: t, vocab });
            }
            // log-sum-exp form keeps confident logits accurate
            let src = logits.row(r);
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - src[t];
        }
    }
    Ok((total / count as f64, probs))
}
