//! Class-feature decorrelation loss, asymmetric multi-label loss, and their
//! weighted sum.

use serde::{Deserialize, Serialize};

use crate::diffmath::{DenseArray, Scalar, Tape, Var, BN_EPSILON};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Which axis of the projected text matrix the Gram matrix correlates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramAxis {
    /// `2N × 2N` inner products between class rows.
    #[default]
    Classes,
    /// `d′ × d′` correlations between feature columns.
    Features,
}

impl std::str::FromStr for GramAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classes" => Ok(GramAxis::Classes),
            "features" => Ok(GramAxis::Features),
            other => Err(Error::Config(format!("unknown gram axis {other:?}"))),
        }
    }
}

impl std::fmt::Display for GramAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GramAxis::Classes => "classes",
            GramAxis::Features => "features",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub delta: f64,
    pub gram_axis: GramAxis,
    pub bn_before_gram: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            alpha: 7e-5,
            gamma_pos: 1.0,
            gamma_neg: 2.0,
            delta: 0.05,
            gram_axis: GramAxis::Classes,
            bn_before_gram: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be > 0");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be ≥ 0");
        }
        if !(self.gamma_pos >= 0.0 && self.gamma_neg >= 0.0) {
            return bad("focusing exponents must be ≥ 0");
        }
        if !(0.0..1.0).contains(&self.delta) {
            return bad("delta must lie in [0, 1)");
        }
        if self.bn_before_gram && self.gram_axis == GramAxis::Classes {
            return bad("bn_before_gram requires gram_axis = features");
        }
        Ok(())
    }

    pub fn asl(&self) -> AslParams {
        AslParams {
            gamma_pos: self.gamma_pos,
            gamma_neg: self.gamma_neg,
            delta: self.delta,
        }
    }
}

/// Gram matrix of projected text features.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<T = f32> {
    pub axis: GramAxis,
    /// `order × order`
    pub entries: DenseArray<T>,
}

impl<T: Scalar> SimilarityMatrix<T> {
    pub fn order(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.entries.get2(i, j)
    }
}

/// Records the Gram matrix of `t` (rows = projected text features).
///
/// * `Classes`: `t · tᵀ`
/// * `Features`: `tᵀ · t`, or with `bn_before_gram` the columns are first
///   standardized (unbiased variance) and the product is divided by `rows − 1`,
///   giving a correlation matrix.
pub fn similarity_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    t: Var,
    axis: GramAxis,
    bn_before_gram: bool,
) -> Result<Var> {
    let (rows, _) = tape.value(t).dims2()?;
    if rows < 2 {
        return Err(Error::Degenerate(format!(
            "similarity matrix needs at least 2 rows, got {rows}"
        )));
    }
    match (axis, bn_before_gram) {
        (GramAxis::Classes, false) => {
            let tt = tape.transpose(t)?;
            tape.matmul(t, tt)
        }
        (GramAxis::Classes, true) => Err(Error::Config(
            "bn_before_gram requires gram_axis = features".into(),
        )),
        (GramAxis::Features, false) => {
            let tt = tape.transpose(t)?;
            tape.matmul(tt, t)
        }
        (GramAxis::Features, true) => {
            let (z, _) = tape.standardize_columns(t, 1, BN_EPSILON)?;
            let zt = tape.transpose(z)?;
            let g = tape.matmul(zt, z)?;
            tape.scale(g, T::cast(1.0 / (rows - 1) as f64))
        }
    }
}

pub fn similarity_matrix<T: Scalar>(
    t_prime: &DenseArray<T>,
    axis: GramAxis,
    bn_before_gram: bool,
) -> Result<SimilarityMatrix<T>> {
    let mut tape = Tape::new();
    let t = tape.constant(t_prime.clone());
    let s = similarity_on_tape(&mut tape, t, axis, bn_before_gram)?;
    Ok(SimilarityMatrix {
        axis,
        entries: tape.value(s).clone(),
    })
}

/// `Σ_i (S_ii − 1)² + λ Σ_{i≠j} S_ij²` and its gradient with respect to `S`.
pub fn mfi_value_and_grad<T: Scalar>(s: &[T], order: usize, lambda: f64) -> (f64, Vec<T>) {
    let mut diag = 0.0f64;
    let mut off = 0.0f64;
    let mut grad = Vec::with_capacity(s.len());
    for i in 0..order {
        for j in 0..order {
            let v = s[i * order + j].widen();
            if i == j {
                diag += (v - 1.0) * (v - 1.0);
                grad.push(T::cast(2.0 * (v - 1.0)));
            } else {
                off += v * v;
                grad.push(T::cast(2.0 * lambda * v));
            }
        }
    }
    (diag + lambda * off, grad)
}

pub fn mfi_loss<T: Scalar>(s: &SimilarityMatrix<T>, lambda: f64) -> f64 {
    mfi_value_and_grad(s.entries.values(), s.order(), lambda).0
}

pub fn mfi_on_tape<T: Scalar>(tape: &mut Tape<T>, s: Var, lambda: f64) -> Result<Var> {
    let (r, c) = tape.value(s).dims2()?;
    if r != c {
        return Err(Error::dim(format!("similarity matrix is {r}×{c}")));
    }
    let (value, grad) = mfi_value_and_grad(tape.value(s).values(), r, lambda);
    tape.scalar_fn(s, value, grad)
}

/// MFI loss of projected text rows and its gradient with respect to them.
pub fn mfi_loss_with_grad<T: Scalar>(
    t_prime: &DenseArray<T>,
    axis: GramAxis,
    bn_before_gram: bool,
    lambda: f64,
) -> Result<(f64, DenseArray<T>)> {
    let mut tape = Tape::new();
    let t = tape.param(t_prime.clone());
    let s = similarity_on_tape(&mut tape, t, axis, bn_before_gram)?;
    let l = mfi_on_tape(&mut tape, s, lambda)?;
    tape.backward(l)?;
    let grad = DenseArray::new(
        t_prime.shape().to_vec(),
        tape.grad(t).expect("param gradient").to_vec(),
    )?;
    Ok((tape.scalar(l).widen(), grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AslParams {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub delta: f64,
}

impl AslParams {
    pub const fn bce() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 0.0,
            delta: 0.0,
        }
    }

    pub const fn focal(gamma: f64) -> Self {
        Self {
            gamma_pos: gamma,
            gamma_neg: gamma,
            delta: 0.0,
        }
    }
}

impl Default for AslParams {
    fn default() -> Self {
        LossConfig::default().asl()
    }
}

/// `w^γ` and `d(w^γ)/dw`, with `0^0 = 1`.
fn focus(w: f64, gamma: f64) -> (f64, f64) {
    if gamma == 0.0 {
        (1.0, 0.0)
    } else {
        (w.powf(gamma), gamma * w.powf(gamma - 1.0))
    }
}

/// Loss of one class prediction and its derivative in `p`.
pub fn asl_term(p: f64, label: u8, params: &AslParams) -> (f64, f64) {
    let lo = PROB_CLAMP;
    let hi = 1.0 - PROB_CLAMP;
    let pc = p.clamp(lo, hi);
    let (loss, dp) = if label == 1 {
        let (w, dw) = focus(1.0 - pc, params.gamma_pos);
        let ln = pc.ln();
        // L = −(1−p)^γ₊ ln p
        (-w * ln, dw * ln - w / pc)
    } else {
        let q = (pc - params.delta).max(0.0);
        if q <= 0.0 {
            (0.0, 0.0)
        } else {
            let (w, dw) = focus(q, params.gamma_neg);
            let ln = (1.0 - q).ln();
            // L = −q^γ₋ ln(1 − q)
            (-w * ln, -dw * ln + w / (1.0 - q))
        }
    };
    let dp = if p > lo && p < hi { dp } else { 0.0 };
    (loss, dp)
}

/// Asymmetric loss of one sample, averaged over classes, with its gradient
/// with respect to `prob`.
pub fn asl_loss(prob: &[f64], labels: &[u8], params: &AslParams) -> Result<(f64, Vec<f64>)> {
    if prob.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} probabilities but {} labels",
            prob.len(),
            labels.len()
        )));
    }
    if prob.is_empty() {
        return Err(Error::Degenerate("no classes".into()));
    }
    let n = prob.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(prob.len());
    for (&p, &y) in prob.iter().zip(labels) {
        let (l, d) = asl_term(p, y, params);
        total += l;
        grad.push(d / n);
    }
    Ok((total / n, grad))
}

/// Mean asymmetric loss over a `[batch, classes]` probability matrix.
pub fn asl_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    labels: &[u8],
    params: &AslParams,
) -> Result<Var> {
    let p: Vec<f64> = tape
        .value(probs)
        .values()
        .iter()
        .map(|v| v.widen())
        .collect();
    let (value, grad) = asl_loss(&p, labels, params)?;
    tape.scalar_fn(probs, value, grad.into_iter().map(T::cast).collect())
}

/// `asl + alpha · mfi`
pub fn combined_loss(asl: f64, mfi: f64, alpha: f64) -> f64 {
    asl + alpha * mfi
}

pub fn combined_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    asl: Var,
    mfi: Var,
    alpha: f64,
) -> Result<Var> {
    let weighted = tape.scale(mfi, T::cast(alpha))?;
    tape.add(asl, weighted)
}
