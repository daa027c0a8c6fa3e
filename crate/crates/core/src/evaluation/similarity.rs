use std::fmt::Write;

use crate::diffmath::{DenseArray, Scalar};
use crate::error::{Error, Result};

fn unit_rows<T: Scalar>(rows: &DenseArray<T>) -> Result<Vec<Vec<f64>>> {
    let (k, _) = rows.dims2()?;
    (0..k)
        .map(|i| {
            let r: Vec<f64> = rows.row(i).iter().map(|v| v.widen()).collect();
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::Degenerate(format!("row {i} has norm {norm}")));
            }
            Ok(r.into_iter().map(|x| x / norm).collect())
        })
        .collect()
}

/// Full K×K cosine matrix of the rows (row-major).
pub fn cosine_matrix<T: Scalar>(rows: &DenseArray<T>) -> Result<Vec<f64>> {
    let u = unit_rows(rows)?;
    let k = u.len();
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            out[i * k + j] = u[i].iter().zip(&u[j]).map(|(a, b)| a * b).sum();
        }
    }
    Ok(out)
}

/// Mean |cosine| over the K·(K−1)/2 distinct row pairs. Rows are normalized
/// first, so raw encoder output is accepted.
pub fn mfi_statistic<T: Scalar>(rows: &DenseArray<T>) -> Result<f64> {
    let (k, _) = rows.dims2()?;
    if k < 2 {
        return Err(Error::Degenerate(format!("need at least 2 rows, got {k}")));
    }
    let c = cosine_matrix(rows)?;
    let mut sum = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            sum += c[i * k + j].abs();
        }
    }
    Ok(sum / (k * (k - 1) / 2) as f64)
}

/// Cosine matrix as CSV with a header row and a leading name column.
pub fn similarity_csv<T: Scalar>(rows: &DenseArray<T>, names: &[String]) -> Result<String> {
    let c = cosine_matrix(rows)?;
    let k = names.len();
    if k * k != c.len() {
        return Err(Error::dim("one name per row required"));
    }
    let mut out = String::from("class");
    for n in names {
        write!(out, ",{n}").unwrap();
    }
    out.push('\n');
    for i in 0..k {
        out.push_str(&names[i]);
        for j in 0..k {
            write!(out, ",{:.6}", c[i * k + j]).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

/// Histogram over [-1, 1] of the off-diagonal cosines, one line per bin.
pub fn histogram_csv<T: Scalar>(rows: &DenseArray<T>, bins: usize) -> Result<String> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let c = cosine_matrix(rows)?;
    let k = (c.len() as f64).sqrt() as usize;
    let mut counts = vec![0usize; bins];
    for i in 0..k {
        for j in i + 1..k {
            let t = ((c[i * k + j] + 1.0) / 2.0 * bins as f64).floor() as isize;
            counts[t.clamp(0, bins as isize - 1) as usize] += 1;
        }
    }
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for (b, n) in counts.iter().enumerate() {
        let lo = -1.0 + 2.0 * b as f64 / bins as f64;
        let hi = -1.0 + 2.0 * (b + 1) as f64 / bins as f64;
        writeln!(out, "{lo:.4},{hi:.4},{n}").unwrap();
    }
    Ok(out)
}
