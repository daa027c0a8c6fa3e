use crate::error::Result;

use super::{DenseArray, Scalar, Tape, Var};

/// Denominator floor of [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// `|a − b| / max(|a|, |b|, GRAD_CHECK_FLOOR)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares the taped gradient of a scalar function against central
/// differences and returns the worst elementwise relative error.
///
/// `f` builds the function on a fresh tape from leaves bound to `params`
/// (in order) and returns the scalar output.
pub fn grad_check<T, F>(f: F, params: &[DenseArray<T>], epsilon: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[DenseArray<T>], with_grad: bool| -> Result<(f64, Vec<Vec<T>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.scalar(out).widen();
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        tape.backward(out)?;
        let grads = vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); tape.value(v).len()])
            })
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(params, true)?;
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let orig = params[p].values()[i];
            work[p].values_mut()[i] = T::cast(orig.widen() + epsilon);
            let (plus, _) = eval(&work, false)?;
            work[p].values_mut()[i] = T::cast(orig.widen() - epsilon);
            let (minus, _) = eval(&work, false)?;
            work[p].values_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(relative_error(analytic[p][i].widen(), numeric));
        }
    }
    Ok(worst)
}
