use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// All-points average precision. Equal scores keep their input order.
/// `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    check_lengths(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l != 0).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] != 0 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(sum / positives as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    /// `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
    pub map: f64,
}

/// Macro mean of per-class AP. `scores[i][j]` is sample `i`, class `j`.
pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<MapResult> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::dim(format!(
            "{} score rows, {} label rows",
            scores.len(),
            labels.len()
        )));
    }
    let n = scores[0].len();
    if scores.iter().any(|r| r.len() != n) || labels.iter().any(|r| r.len() != n) {
        return Err(Error::dim("ragged score or label rows"));
    }
    let mut per_class = Vec::with_capacity(n);
    for j in 0..n {
        let s: Vec<f64> = scores.iter().map(|r| r[j]).collect();
        let l: Vec<u8> = labels.iter().map(|r| r[j]).collect();
        per_class.push(average_precision(&s, &l)?);
    }
    let skipped: Vec<usize> = (0..n).filter(|&j| per_class[j].is_none()).collect();
    let evaluated: Vec<f64> = per_class.iter().flatten().copied().collect();
    if evaluated.is_empty() {
        return Err(Error::Degenerate("no class has a positive sample".into()));
    }
    let map = evaluated.iter().sum::<f64>() / evaluated.len() as f64;
    Ok(MapResult {
        per_class,
        skipped,
        map,
    })
}

/// `TP / (TP + FP)` over pairs scored at or above `threshold`; `None` when
/// nothing reaches the threshold.
pub fn precision_at(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Option<f64>> {
    check_lengths(scores, labels)?;
    let (mut tp, mut predicted) = (0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        if s >= threshold {
            predicted += 1;
            tp += (l != 0) as usize;
        }
    }
    Ok((predicted > 0).then(|| tp as f64 / predicted as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[1, 0, 1])
            .unwrap()
            .unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_worst() {
        assert_eq!(
            average_precision(&[3.0, 2.0, 1.0], &[1, 1, 0]).unwrap(),
            Some(1.0)
        );
        let ap = average_precision(&[1.0, 2.0, 3.0, 4.0], &[1, 0, 0, 0])
            .unwrap()
            .unwrap();
        assert!((ap - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ties_keep_input_order() {
        assert_eq!(average_precision(&[0.5, 0.5], &[1, 0]).unwrap(), Some(1.0));
        assert_eq!(average_precision(&[0.5, 0.5], &[0, 1]).unwrap(), Some(0.5));
    }

    #[test]
    fn no_positives_and_length_mismatch() {
        assert_eq!(average_precision(&[0.1], &[0]).unwrap(), None);
        assert!(average_precision(&[0.1], &[0, 1]).is_err());
    }

    #[test]
    fn map_skips_empty_classes() {
        let scores = vec![vec![0.9, 0.1, 0.3], vec![0.2, 0.8, 0.4]];
        let labels = vec![vec![1, 0, 0], vec![0, 1, 0]];
        let r = mean_average_precision(&scores, &labels).unwrap();
        assert_eq!(r.skipped, vec![2]);
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn precision_cases() {
        assert_eq!(precision_at(&[0.9, 0.2], &[1, 0], 0.5).unwrap(), Some(1.0));
        assert_eq!(precision_at(&[0.1, 0.2], &[1, 0], 0.5).unwrap(), None);
        assert_eq!(
            precision_at(&[0.5, 0.7, 0.6], &[1, 0, 0], 0.5).unwrap(),
            Some(1.0 / 3.0)
        );
    }
}
