//! Dense row-major `f64` tensors and the numeric kernels shared by the
//! autodiff graph and the non-recorded code paths.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Dense n-dimensional array with row-major storage.
///
/// Every constructor rejects non-finite entries, so a `Tensor` in hand is
/// always finite. Storage is shared between clones and copied on write.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Invalid(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// Builds a tensor whose values are already known to be finite.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite());
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[], value)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Invalid("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.numel() / self.last_dim()
        }
    }

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return shape_err("reshape", &self.shape, shape);
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        Self::new(self.shape.clone(), data)
    }

    /// Applies `f` pairwise; shapes must match or one side must be a scalar.
    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let (shape, data): (Vec<usize>, Vec<f64>) = if self.shape == other.shape {
            (
                self.shape.clone(),
                self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect(),
            )
        } else if other.numel() == 1 {
            let b = other.data[0];
            (self.shape.clone(), self.data.iter().map(|&a| f(a, b)).collect())
        } else if self.numel() == 1 {
            let a = self.data[0];
            (other.shape.clone(), other.data.iter().map(|&b| f(a, b)).collect())
        } else {
            return shape_err(op, &self.shape, &other.shape);
        };
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op));
        }
        Ok(Self::from_parts(shape, data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|v| v * c).collect())
    }

    /// In-place `self += alpha * other` for equal shapes.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return shape_err("axpy", &self.shape, &other.shape);
        }
        for (a, b) in Arc::make_mut(&mut self.data).iter_mut().zip(other.data.iter()) {
            *a += alpha * b;
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("axpy"));
        }
        Ok(())
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return shape_err("dot", &self.shape, &other.shape);
        }
        Ok(self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).sum())
    }

    /// Matrix product of 2-D tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        self.matmul_t(other, false, false)
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_t(&self, other: &Tensor, trans_a: bool, trans_b: bool) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            return shape_err("matmul", &self.shape, &other.shape);
        }
        let (m, ka) = dims2(&self.shape, trans_a);
        let (kb, n) = dims2(&other.shape, trans_b);
        if ka != kb {
            return shape_err("matmul", &self.shape, &other.shape);
        }
        let mut out = vec![0.0; m * n];
        gemm(m, ka, n, &self.data, trans_a, &other.data, trans_b, &mut out, 0.0);
        Ok(Self::from_parts(vec![m, n], out))
    }

    /// Batched matrix product of 3-D tensors `[b, m, k] x [b, k, n]`.
    pub fn bmm_t(&self, other: &Tensor, trans_a: bool, trans_b: bool) -> Result<Self> {
        if self.rank() != 3 || other.rank() != 3 || self.shape[0] != other.shape[0] {
            return shape_err("bmm", &self.shape, &other.shape);
        }
        let b = self.shape[0];
        let (m, ka) = dims2(&self.shape[1..], trans_a);
        let (kb, n) = dims2(&other.shape[1..], trans_b);
        if ka != kb {
            return shape_err("bmm", &self.shape, &other.shape);
        }
        let sa = m * ka;
        let sb = kb * n;
        let mut out = vec![0.0; b * m * n];
        for i in 0..b {
            gemm(
                m,
                ka,
                n,
                &self.data[i * sa..(i + 1) * sa],
                trans_a,
                &other.data[i * sb..(i + 1) * sb],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        Ok(Self::from_parts(vec![b, m, n], out))
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::Invalid("transpose needs a 2-D tensor".into()));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::Invalid(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = (*self.data).clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |j: usize| base + j * inner;
                let mx = (0..len).map(|j| out[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (out[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[idx(j)] /= z;
                }
            }
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    /// Index of the largest entry in each row (last axis).
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

fn dims2(shape: &[usize], trans: bool) -> (usize, usize) {
    if trans {
        (shape[1], shape[0])
    } else {
        (shape[0], shape[1])
    }
}

/// `c = beta * c + op(a) op(b)` where `op(a)` is `m x k` and `op(b)` is
/// `k x n`. A transposed operand is stored in its untransposed row-major
/// layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices, and `c` does not alias `a` or `b`.
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
