//! Per-location logits against the projected text bank and softmax-weighted
//! spatial pooling into one positive and one negative logit per class.

use crate::diffmath::array::{gemm_nt, softmax_kernel};
use crate::diffmath::{sigmoid, DenseArray, Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::projectors::{self, FeatureGrid, PoolingOrder, ProjectedTextBank, ProjectorParams};

pub const DEFAULT_LOGIT_SCALE: f64 = 5.0;

/// Local logit maps, class-major: entry `(j, h, w)` at `(j·H + h)·W + w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMaps<T = f32> {
    pub n_classes: usize,
    pub height: usize,
    pub width: usize,
    pub pos: Vec<T>,
    pub neg: Vec<T>,
}

impl<T: Scalar> LogitMaps<T> {
    fn span(&self, j: usize) -> std::ops::Range<usize> {
        let hw = self.height * self.width;
        j * hw..(j + 1) * hw
    }

    pub fn pos_map(&self, j: usize) -> &[T] {
        &self.pos[self.span(j)]
    }

    pub fn neg_map(&self, j: usize) -> &[T] {
        &self.neg[self.span(j)]
    }
}

/// Pooled logits, one pair per class.
#[derive(Debug, Clone, PartialEq)]
pub struct MlrLogits {
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
}

impl MlrLogits {
    pub fn probabilities(&self) -> Vec<f64> {
        self.pos
            .iter()
            .zip(&self.neg)
            .map(|(&p, &n)| class_probability(p, n))
            .collect()
    }
}

/// `scale · ⟨z′[h,w], t′_row⟩` for every location and every text row.
///
/// `z_prime` is `[H, W, d′]`, `text` is `[2N, d′]` (positives then negatives).
pub fn local_logits<T: Scalar>(
    z_prime: &DenseArray<T>,
    text: &DenseArray<T>,
    scale: f64,
) -> Result<LogitMaps<T>> {
    let (h, w, d) = match z_prime.shape() {
        &[h, w, d] => (h, w, d),
        s => return Err(Error::dim(format!("expected an H×W×d′ grid, got {s:?}"))),
    };
    let (rows, td) = text.dims2()?;
    if td != d {
        return Err(Error::dim(format!("grid width {d} but text width {td}")));
    }
    if rows % 2 != 0 || rows == 0 {
        return Err(Error::dim(format!(
            "text bank has {rows} rows, expected 2N"
        )));
    }
    let n = rows / 2;
    let hw = h * w;
    let dots = gemm_nt(z_prime.values(), text.values(), hw, d, rows);
    let s = T::cast(scale);
    let mut pos = vec![T::zero(); n * hw];
    let mut neg = vec![T::zero(); n * hw];
    for loc in 0..hw {
        for j in 0..n {
            pos[j * hw + loc] = dots[loc * rows + j] * s;
            neg[j * hw + loc] = dots[loc * rows + n + j] * s;
        }
    }
    Ok(LogitMaps {
        n_classes: n,
        height: h,
        width: w,
        pos,
        neg,
    })
}

/// `Σ softmax(map) · map` over all locations.
pub fn aggregate<T: Scalar>(map: &[T]) -> T {
    let weights = softmax_kernel(map, (1, map.len(), 1));
    let mut acc = 0.0f64;
    for (q, l) in weights.iter().zip(map) {
        acc += q.widen() * l.widen();
    }
    T::cast(acc)
}

/// Two-way softmax of a positive and a negative logit, i.e. `sigmoid(pos − neg)`.
pub fn class_probability(pos: f64, neg: f64) -> f64 {
    sigmoid(pos - neg)
}

pub fn mlr_logits<T: Scalar>(maps: &LogitMaps<T>) -> MlrLogits {
    MlrLogits {
        pos: (0..maps.n_classes)
            .map(|j| aggregate(maps.pos_map(j)).widen())
            .collect(),
        neg: (0..maps.n_classes)
            .map(|j| aggregate(maps.neg_map(j)).widen())
            .collect(),
    }
}

/// Class probabilities of one image under `params`.
pub fn predict<T: Scalar>(
    grid: &FeatureGrid,
    text: &ProjectedTextBank<T>,
    params: &ProjectorParams<T>,
    scale: f64,
    pooling: PoolingOrder,
) -> Result<Vec<f64>> {
    let pooled;
    let grid = match pooling {
        PoolingOrder::ProjectThenPool => grid,
        PoolingOrder::PoolThenProject => {
            pooled = grid.mean_pooled();
            &pooled
        }
    };
    let z = projectors::project_image(grid, params)?;
    let maps = local_logits(&z, &text.rows, scale)?;
    Ok(mlr_logits(&maps).probabilities())
}

/// Batched taped version: `z` stacks the projected locations of several
/// images (`segments[i]` rows each), `text` is `[2N, d′]`. Returns the
/// `[batch, N]` class probabilities.
pub fn probabilities_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    text: Var,
    segments: &[usize],
    scale: f64,
) -> Result<Var> {
    let tt = tape.transpose(text)?;
    let logits = tape.matmul(z, tt)?;
    let logits = tape.scale(logits, T::cast(scale))?;
    let pooled = tape.segment_softmax_pool(logits, segments)?;
    tape.paired_sigmoid(pooled)
}
