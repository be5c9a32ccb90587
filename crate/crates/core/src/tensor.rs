//! Dense row-major tensors.
//!
//! Storage is a flat `Vec` plus a shape; there are no views or strides. Binary
//! operations require identical shapes, the only broadcast being a rank-0
//! scalar on the right-hand side.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

/// Elementwise operators. `Relu`, `Sign` and `Clamp` are unary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise<S> {
    Add,
    Sub,
    Mul,
    Relu,
    Sign,
    Clamp { lo: S, hi: S },
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::validation(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor construction",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: Vec<usize>, value: S) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![value; len])
    }

    /// A rank-0 tensor holding one value.
    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<S>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[S]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    left: vec![i, r.len()],
                    right: vec![0, cols],
                });
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    /// Row count of a matrix (first dimension for higher ranks).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per row.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.rows().max(1)
    }

    pub fn row(&self, i: usize) -> &[S] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.contains(&0) {
            return Err(Error::Dimension {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Gathers the listed rows into a new tensor.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let w = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= self.rows() {
                return Err(Error::validation(format!(
                    "row index {i} out of range for {} rows",
                    self.rows()
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::new(shape, data)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        if other.shape.is_empty() {
            let s = other.data[0];
            return Ok(self.map(|v| f(v, s)));
        }
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: S) -> Self {
        self.map(|v| v * s)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > S::zero() { v } else { S::zero() })
    }

    /// Sign with `sign(0) == 0`.
    pub fn sign(&self) -> Self {
        self.map(sign)
    }

    pub fn clamp(&self, lo: S, hi: S) -> Self {
        self.map(|v| clamp(v, lo, hi))
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest entry in each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    /// Converts element type, going through `f64`.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| T::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }
}

pub(crate) fn sign<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

pub(crate) fn clamp<S: Scalar>(v: S, lo: S, hi: S) -> S {
    hi.min(lo.max(v))
}

/// Applies `op` to `a` (and `b` for binary operators).
pub fn elementwise<S: Scalar>(
    op: Elementwise<S>,
    a: &Tensor<S>,
    b: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    match (op, b) {
        (Elementwise::Add, Some(b)) => a.add(b),
        (Elementwise::Sub, Some(b)) => a.sub(b),
        (Elementwise::Mul, Some(b)) => a.mul(b),
        (Elementwise::Relu, None) => Ok(a.relu()),
        (Elementwise::Sign, None) => Ok(a.sign()),
        (Elementwise::Clamp { lo, hi }, None) => Ok(a.clamp(lo, hi)),
        (op, b) => Err(Error::validation(format!(
            "operator {op:?} called with {} operand(s)",
            1 + usize::from(b.is_some())
        ))),
    }
}

fn as_matrix<S>(t: &Tensor<S>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape[..] {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Dimension {
            op,
            left: t.shape.clone(),
            right: vec![],
        }),
    }
}

/// `a × b` for `a: r×k`, `b: k×c`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    matmul_t(a, false, b, false)
}

/// Matrix product with optional transposition of either operand.
pub fn matmul_t<S: Scalar>(
    a: &Tensor<S>,
    trans_a: bool,
    b: &Tensor<S>,
    trans_b: bool,
) -> Result<Tensor<S>> {
    let (ar, ac) = as_matrix(a, "matmul")?;
    let (br, bc) = as_matrix(b, "matmul")?;
    let (m, k, rsa, csa) = if trans_a {
        (ac, ar, 1, ac as isize)
    } else {
        (ar, ac, ac as isize, 1)
    };
    let (k2, n, rsb, csb) = if trans_b {
        (bc, br, 1, bc as isize)
    } else {
        (br, bc, bc as isize, 1)
    };
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![S::zero(); m * n];
    gemm_slices(m, k, n, &a.data, rsa, csa, &b.data, rsb, csb, &mut out, S::zero());
    Tensor::matrix(m, n, out)
}

/// `c ← a·b + beta·c` on row-major slices with explicit strides for `a` and
/// `b`. `c` is always a dense `m×n` row-major block.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_slices<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    rsa: isize,
    csa: isize,
    b: &[S],
    rsb: isize,
    csb: isize,
    c: &mut [S],
    beta: S,
) {
    let span = |r: usize, c: usize, rs: isize, cs: isize| {
        if r == 0 || c == 0 {
            0
        } else {
            (r as isize - 1) * rs + (c as isize - 1) * cs + 1
        }
    };
    assert!(span(m, k, rsa, csa) as usize <= a.len(), "gemm: lhs too short");
    assert!(span(k, n, rsb, csb) as usize <= b.len(), "gemm: rhs too short");
    assert!(m * n <= c.len(), "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: extents checked above; `c` is a distinct &mut borrow.
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::one(),
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

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    let (_, k) = as_matrix(logits, "log_softmax")?;
    if k < 2 {
        return Err(Error::validation(format!(
            "log_softmax needs at least 2 classes, got {k}"
        )));
    }
    let mut out = logits.clone();
    for i in 0..out.rows() {
        log_softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

pub(crate) fn log_softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let sum: S = row.iter().map(|&v| (v - max).exp()).sum();
    let log_sum = sum.ln() + max;
    for v in row.iter_mut() {
        *v = *v - log_sum;
    }
}
