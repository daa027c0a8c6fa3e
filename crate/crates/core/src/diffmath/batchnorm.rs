use crate::error::{Error, Result};

use super::{DenseArray, Scalar};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Per-feature batch normalization parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: vec![T::one(); features],
            beta: vec![T::zero(); features],
            running_mean: vec![T::zero(); features],
            running_var: vec![T::one(); features],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    /// Folds one batch's statistics into the running estimates. `var` is
    /// the unbiased batch variance.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = T::cast((1.0 - m) * r.widen() + m * b);
        }
        for (r, &b) in self.running_var.iter_mut().zip(var) {
            *r = T::cast(((1.0 - m) * r.widen() + m * b).max(0.0));
        }
    }

    pub fn cast<U: Scalar>(&self) -> BatchNormState<U> {
        let c = |v: &[T]| v.iter().map(|x| U::cast(x.widen())).collect();
        BatchNormState {
            gamma: c(&self.gamma),
            beta: c(&self.beta),
            running_mean: c(&self.running_mean),
            running_var: c(&self.running_var),
            epsilon: self.epsilon,
            momentum: self.momentum,
        }
    }

    /// Per-column `(scale, shift)` that eval mode applies before the affine.
    pub(crate) fn eval_affine(&self) -> (Vec<T>, Vec<T>) {
        let mut scale = Vec::with_capacity(self.features());
        let mut shift = Vec::with_capacity(self.features());
        for (&m, &v) in self.running_mean.iter().zip(&self.running_var) {
            let inv = 1.0 / (v.widen() + self.epsilon).sqrt();
            scale.push(T::cast(inv));
            shift.push(T::cast(-m.widen() * inv));
        }
        (scale, shift)
    }
}

/// Column means and variances of an `n×f` matrix; variance divides by
/// `n - correction`.
pub(crate) fn column_moments<T: Scalar>(
    x: &[T],
    n: usize,
    f: usize,
    correction: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0f64; f];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(&x[r * f..(r + 1) * f]) {
            *m += v.widen();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0f64; f];
    for r in 0..n {
        for ((s, v), m) in var.iter_mut().zip(&x[r * f..(r + 1) * f]).zip(&mean) {
            let d = v.widen() - m;
            *s += d * d;
        }
    }
    let denom = (n - correction) as f64;
    var.iter_mut().for_each(|s| *s /= denom);
    (mean, var)
}

/// Standardizes each column: `(x - mean) / sqrt(var + eps)`. Returns the
/// standardized values, the per-column inverse deviations, and the moments.
pub(crate) fn standardize_kernel<T: Scalar>(
    x: &[T],
    n: usize,
    f: usize,
    correction: usize,
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<f64>, Vec<f64>) {
    let (mean, var) = column_moments(x, n, f, correction);
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = Vec::with_capacity(x.len());
    for r in 0..n {
        for c in 0..f {
            out.push(T::cast((x[r * f + c].widen() - mean[c]) * inv[c]));
        }
    }
    (out, inv.into_iter().map(T::cast).collect(), mean, var)
}

/// Batch normalization over the rows of an `n×f` matrix.
///
/// Train mode normalizes with the biased batch variance and folds the batch
/// mean and unbiased variance into the running statistics. Eval mode uses
/// the running statistics and leaves `state` untouched.
pub fn batch_norm<T: Scalar>(
    rows: &DenseArray<T>,
    state: &mut BatchNormState<T>,
    mode: NormMode,
) -> Result<DenseArray<T>> {
    let (n, f) = rows.dims2()?;
    if f != state.features() {
        return Err(Error::dim(format!(
            "batch norm over {f} features with state for {}",
            state.features()
        )));
    }
    let x = rows.values();
    let mut out = Vec::with_capacity(x.len());
    match mode {
        NormMode::Train => {
            if n < 2 {
                return Err(Error::Degenerate(format!(
                    "batch norm in train mode needs at least 2 rows, got {n}"
                )));
            }
            let (xhat, _, mean, _) = standardize_kernel(x, n, f, 0, state.epsilon);
            for r in 0..n {
                for c in 0..f {
                    let v =
                        xhat[r * f + c].widen() * state.gamma[c].widen() + state.beta[c].widen();
                    out.push(T::cast(v));
                }
            }
            let (_, unbiased) = column_moments(x, n, f, 1);
            state.update_running(&mean, &unbiased);
        }
        NormMode::Eval => {
            let (scale, shift) = state.eval_affine();
            for r in 0..n {
                for c in 0..f {
                    let xhat = x[r * f + c].widen() * scale[c].widen() + shift[c].widen();
                    out.push(T::cast(
                        xhat * state.gamma[c].widen() + state.beta[c].widen(),
                    ));
                }
            }
        }
    }
    let out = DenseArray::from_parts(vec![n, f], out);
    out.check_finite("batch_norm")?;
    Ok(out)
}
