use crate::error::{Error, Result};

use super::Scalar;

/// Row-major dense array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray<T = f32> {
    shape: Vec<usize>,
    values: Vec<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> DenseArray<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![T::zero(); n],
            grad: None,
        }
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::cast(v)).collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut a = Self::zeros(vec![n, n]);
        for i in 0..n {
            a.values[i * n + i] = T::one();
        }
        a
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 array.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::dim(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.values.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    pub fn get2(&self, r: usize, c: usize) -> T {
        self.values[r * self.shape[1] + c]
    }

    /// Row `r` of a matrix.
    pub fn row(&self, r: usize) -> &[T] {
        let c = self.shape[1];
        &self.values[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> DenseArray<U> {
        DenseArray {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::cast(v.widen())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::cast(v.widen())).collect()),
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, values: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self {
            shape,
            values,
            grad: None,
        }
    }

    pub(crate) fn check_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Degenerate(format!(
                "{op} produced a non-finite value"
            )))
        }
    }

    /// `(outer, len, inner)` strides for slicing along `axis`.
    pub(crate) fn axis_split(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.shape.len() {
            return Err(Error::dim(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }
}

// ---- kernels shared by the pure and taped paths ----
//
// All reductions run in f64 in a fixed left-to-right order.

/// `out[m×n] = a[m×k] · b[k×n]`. Each output sums over `k` in index order in
/// f64; rows are processed four at a time to reuse the widened `b` row.
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let b64: Vec<f64> = b.iter().map(|v| v.widen()).collect();
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0.0f64; 4 * n];
    let mut i = 0;
    while i < m {
        let rows = (m - i).min(4);
        acc.iter_mut().for_each(|x| *x = 0.0);
        let (a0, rest) = acc.split_at_mut(n);
        let (a1, rest) = rest.split_at_mut(n);
        let (a2, a3) = rest.split_at_mut(n);
        for p in 0..k {
            let brow = &b64[p * n..(p + 1) * n];
            let w = |r: usize| {
                if r < rows {
                    a[(i + r) * k + p].widen()
                } else {
                    0.0
                }
            };
            let (w0, w1, w2, w3) = (w(0), w(1), w(2), w(3));
            for j in 0..n {
                let bv = brow[j];
                a0[j] += w0 * bv;
                a1[j] += w1 * bv;
                a2[j] += w2 * bv;
                a3[j] += w3 * bv;
            }
        }
        out.extend(acc[..rows * n].iter().map(|&x| T::cast(x)));
        i += rows;
    }
    out
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`. Same summation order as [`gemm_nn`] on the
/// transposed operand, so both paths agree bitwise.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    gemm_nn(a, &transpose_raw(b, n, k), m, k, n)
}

/// `out[k×n] = a[m×k]ᵀ · b[m×n]`, summing over `m` in index order.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    gemm_nn(&transpose_raw(a, m, k), b, k, m, n)
}

pub(crate) fn transpose_raw<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Normalizes every slice along the split axis; returns the output and the
/// per-slice norms in `(outer, inner)` order.
pub(crate) fn normalize_kernel<T: Scalar>(
    x: &[T],
    (outer, len, inner): (usize, usize, usize),
) -> Result<(Vec<T>, Vec<T>)> {
    let mut out = vec![T::zero(); x.len()];
    let mut norms = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for j in 0..inner {
            let mut sq = 0.0f64;
            for i in 0..len {
                let v = x[(o * len + i) * inner + j].widen();
                sq += v * v;
            }
            let norm = sq.sqrt();
            if !norm.is_finite() || norm <= 0.0 {
                return Err(Error::Degenerate(format!(
                    "cannot normalize a slice with norm {norm}"
                )));
            }
            for i in 0..len {
                let idx = (o * len + i) * inner + j;
                out[idx] = T::cast(x[idx].widen() / norm);
            }
            norms.push(T::cast(norm));
        }
    }
    Ok((out, norms))
}

pub(crate) fn softmax_kernel<T: Scalar>(
    x: &[T],
    (outer, len, inner): (usize, usize, usize),
) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * len + i) * inner + j;
            let mut max = f64::NEG_INFINITY;
            for i in 0..len {
                max = max.max(x[at(i)].widen());
            }
            let mut total = 0.0f64;
            let mut exps = Vec::with_capacity(len);
            for i in 0..len {
                let e = (x[at(i)].widen() - max).exp();
                total += e;
                exps.push(e);
            }
            for (i, e) in exps.into_iter().enumerate() {
                out[at(i)] = T::cast(e / total);
            }
        }
    }
    out
}

// ---- pure operations ----

pub fn matmul<T: Scalar>(a: &DenseArray<T>, b: &DenseArray<T>) -> Result<DenseArray<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner extents differ: {m}×{k} · {k2}×{n}"
        )));
    }
    let out = DenseArray::from_parts(vec![m, n], gemm_nn(&a.values, &b.values, m, k, n));
    out.check_finite("matmul")?;
    Ok(out)
}

pub fn transpose<T: Scalar>(a: &DenseArray<T>) -> Result<DenseArray<T>> {
    let (r, c) = a.dims2()?;
    Ok(DenseArray::from_parts(
        vec![c, r],
        transpose_raw(&a.values, r, c),
    ))
}

/// Scales every slice along `axis` to unit Euclidean norm.
pub fn l2_normalize<T: Scalar>(v: &DenseArray<T>, axis: usize) -> Result<DenseArray<T>> {
    let split = v.axis_split(axis)?;
    let (out, _) = normalize_kernel(&v.values, split)?;
    Ok(DenseArray::from_parts(v.shape.clone(), out))
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<T: Scalar>(v: &DenseArray<T>, axis: usize) -> Result<DenseArray<T>> {
    if !v.is_finite() {
        return Err(Error::Degenerate("softmax input is not finite".into()));
    }
    let split = v.axis_split(axis)?;
    Ok(DenseArray::from_parts(
        v.shape.clone(),
        softmax_kernel(&v.values, split),
    ))
}

pub fn relu<T: Scalar>(v: &DenseArray<T>) -> DenseArray<T> {
    DenseArray::from_parts(
        v.shape.clone(),
        v.values
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect(),
    )
}
