//! Dense row-major tensors and the eager forward kernels used by the model.
//!
//! Everything here is plain value math. Gradient recording lives in
//! [`crate::tape`], which calls into these kernels for its forward values.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{shape_err, CdpError, Result};
use crate::masking::AttentionMask;

/// Additive value used for blocked attention entries. Large enough that
/// `exp` underflows to exactly zero, small enough to never produce NaN.
pub const MASK_NEG: f64 = -1e9;

/// Scalar type of the kernel. Implemented for `f32` (training, benchmarks)
/// and `f64` (oracle and equivalence checks).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `c = alpha * a·b + beta * c` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

fn check_span(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) * rs + (cols - 1) * cs;
        assert!(last < len, "gemm operand out of bounds");
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                check_span(a.len(), m, k, rsa, csa);
                check_span(b.len(), k, n, rsb, csb);
                check_span(c.len(), m, n, rsc, csc);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand span was bounds-checked above and `c`
                // is exclusively borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(CdpError::Contract("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count of a matrix (first dim; 1 for vectors and scalars).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Column count of a matrix (trailing dims flattened).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(shape_err("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(shape_err(op, &self.shape, &[]));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// `a[m,k] · b[k,n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.require_matrix("matmul")?;
    let (k2, n) = b.require_matrix("matmul")?;
    if k != k2 {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(m, k, n, T::one(), &a.data, k, 1, &b.data, n, 1, T::zero(), &mut out.data, n, 1);
    Ok(out)
}

/// `a[m,k] · b[n,k]ᵀ`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.require_matrix("matmul_nt")?;
    let (n, k2) = b.require_matrix("matmul_nt")?;
    if k != k2 {
        return Err(shape_err("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(m, k, n, T::one(), &a.data, k, 1, &b.data, 1, k, T::zero(), &mut out.data, n, 1);
    Ok(out)
}

/// `a[k,m]ᵀ · b[k,n]`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.require_matrix("matmul_tn")?;
    let (k2, n) = b.require_matrix("matmul_tn")?;
    if k != k2 {
        return Err(shape_err("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(m, k, n, T::one(), &a.data, 1, m, &b.data, n, 1, T::zero(), &mut out.data, n, 1);
    Ok(out)
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape != b.shape {
        return Err(shape_err("add", a.shape(), b.shape()));
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| *x + *y).collect(),
    })
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape != b.shape {
        return Err(shape_err("mul", a.shape(), b.shape()));
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| *x * *y).collect(),
    })
}

/// Broadcast-add a length-`n` vector to every row of `a[m,n]`.
pub fn add_row<T: Real>(a: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, n) = a.require_matrix("add_row")?;
    if bias.numel() != n {
        return Err(shape_err("add_row", a.shape(), bias.shape()));
    }
    let mut out = a.clone();
    for row in out.data.chunks_mut(n) {
        for (x, b) in row.iter_mut().zip(&bias.data) {
            *x += *b;
        }
    }
    Ok(out)
}

pub fn scale<T: Real>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|x| x * s)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

pub fn gelu<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    a.map(gelu_scalar)
}

/// Row-wise softmax of `logits + mask`, where blocked mask entries carry
/// [`MASK_NEG`]. Blocked outputs underflow to exactly zero.
pub fn softmax_masked<T: Real>(logits: &Tensor<T>, mask: &AttentionMask) -> Result<Tensor<T>> {
    let (r, c) = logits.require_matrix("softmax_masked")?;
    if mask.rows() != r || mask.cols() != c {
        return Err(shape_err("softmax_masked", logits.shape(), &[mask.rows(), mask.cols()]));
    }
    let neg = T::lit(MASK_NEG);
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        if !mask.row_has_visible(i) {
            return Err(CdpError::DegenerateRow { row: i });
        }
        let src = logits.row(i);
        let dst = &mut out.data[i * c..(i + 1) * c];
        let mut max = T::neg_infinity();
        for j in 0..c {
            let z = if mask.is_visible(i, j) { src[j] } else { src[j] + neg };
            dst[j] = z;
            max = max.max(z);
        }
        let mut total = T::zero();
        for z in dst.iter_mut() {
            *z = (*z - max).exp();
            total += *z;
        }
        for z in dst.iter_mut() {
            *z = *z / total;
        }
    }
    Ok(out)
}

/// Per-row statistics saved by [`layer_norm`] for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormStats<T> {
    /// Normalized input before gain/bias, same shape as the input.
    pub xhat: Tensor<T>,
    /// `1 / sqrt(var + eps)` per row.
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormStats<T>)> {
    let (n, d) = x.require_matrix("layer_norm")?;
    if gain.numel() != d || bias.numel() != d {
        return Err(shape_err("layer_norm", x.shape(), gain.shape()));
    }
    let dd = T::from_usize(d).expect("dim fits");
    let mut xhat = Tensor::zeros(&[n, d]);
    let mut out = Tensor::zeros(&[n, d]);
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / dd;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dd;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat.data[i * d + j] = h;
            out.data[i * d + j] = h * gain.data[j] + bias.data[j];
        }
    }
    Ok((out, LayerNormStats { xhat, rstd }))
}

/// Gather rows of `table[v,d]` by index.
pub fn gather_rows<T: Real>(table: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let (v, d) = table.require_matrix("gather_rows")?;
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        if i >= v {
            return Err(CdpError::Index { index: i, len: v });
        }
        data.extend_from_slice(table.row(i));
    }
    Tensor::new(vec![idx.len(), d], data)
}

pub fn concat_rows<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let d = parts.first().map_or(0, |p| p.cols());
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        if p.shape().len() != 2 || p.cols() != d {
            return Err(shape_err("concat_rows", p.shape(), &[d]));
        }
        rows += p.rows();
        data.extend_from_slice(&p.data);
    }
    Tensor::new(vec![rows, d], data)
}

pub fn slice_rows<T: Real>(a: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (m, d) = a.require_matrix("slice_rows")?;
    if start + len > m {
        return Err(CdpError::Index { index: start + len, len: m });
    }
    Tensor::new(vec![len, d], a.data[start * d..(start + len) * d].to_vec())
}

pub fn slice_cols<T: Real>(a: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (m, d) = a.require_matrix("slice_cols")?;
    if start + len > d {
        return Err(CdpError::Index { index: start + len, len: d });
    }
    let mut data = Vec::with_capacity(m * len);
    for i in 0..m {
        data.extend_from_slice(&a.data[i * d + start..i * d + start + len]);
    }
    Tensor::new(vec![m, len], data)
}

pub fn concat_cols<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let m = parts.first().map_or(0, |p| p.rows());
    if parts.iter().any(|p| p.shape().len() != 2 || p.rows() != m) {
        return Err(CdpError::Contract("concat_cols row mismatch".into()));
    }
    let width: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(m * width);
    for i in 0..m {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(vec![m, width], data)
}

/// Mean squared error over all elements.
pub fn mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape != target.shape {
        return Err(shape_err("mse", pred.shape(), target.shape()));
    }
    let n = T::from_usize(pred.numel().max(1)).expect("count fits");
    Ok(pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| (*p - *t) * (*p - *t))
        .sum::<T>()
        / n)
}
