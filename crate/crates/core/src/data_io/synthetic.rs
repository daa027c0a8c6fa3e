//! Synthetic entangled features with known ground truth.
//!
//! Orthonormal prototypes `u_j` are pulled toward their normalized mean `m`:
//! `v_j = normalize((1−ρ)·u_j + ρ·m)`. Every pair of `v_j` then has the same
//! cosine similarity, a closed-form increasing function of `ρ`.

use serde::{Deserialize, Serialize};

use crate::diffmath::DenseArray;
use crate::error::{Error, Result};
use crate::projectors::{FeatureGrid, PromptTemplates, TextBank};
use crate::rng::XorShift64Star;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub d: usize,
    pub grid: (usize, usize),
    pub rho: f64,
    /// When set, `rho` is replaced by the value whose pairwise similarity
    /// equals this target.
    pub target_similarity: Option<f64>,
    pub samples: usize,
    pub test_samples: usize,
    /// Inclusive range of labels drawn per image.
    pub labels_per_image: (usize, usize),
    /// Std of isotropic noise added to every cell, in units of a unit vector.
    pub noise_sigma: f64,
    /// Same, for the text bank rows.
    pub text_noise: f64,
    /// Weight `ε` in the negative prompt direction `normalize(m − ε·v_j)`.
    pub negative_epsilon: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 20,
            d: 64,
            grid: (4, 4),
            rho: 0.5,
            target_similarity: Some(0.75),
            samples: 400,
            test_samples: 1000,
            labels_per_image: (1, 3),
            noise_sigma: 0.7,
            text_noise: 0.01,
            negative_epsilon: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.grid;
        let (lo, hi) = self.labels_per_image;
        if self.n_classes < 2 {
            return Err(Error::Config(
                "synthetic data needs at least 2 classes".into(),
            ));
        }
        if self.n_classes > self.d {
            return Err(Error::Config(format!(
                "cannot build {} orthonormal prototypes in {} dimensions",
                self.n_classes, self.d
            )));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho {} outside [0, 1)", self.rho)));
        }
        if let Some(t) = self.target_similarity {
            if !(0.0..1.0).contains(&t) {
                return Err(Error::Config(format!(
                    "target similarity {t} outside [0, 1)"
                )));
            }
        }
        if h == 0 || w == 0 {
            return Err(Error::Config("grid extents must be positive".into()));
        }
        if lo > hi || hi > self.n_classes || hi > h * w {
            return Err(Error::Config(format!(
                "labels_per_image {lo}..={hi} infeasible for {} classes on a {h}×{w} grid",
                self.n_classes
            )));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("text_noise", self.text_noise),
            ("negative_epsilon", self.negative_epsilon),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }

    pub fn effective_rho(&self) -> Result<f64> {
        match self.target_similarity {
            Some(t) => rho_for_similarity(t, self.n_classes),
            None => Ok(self.rho),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedCell {
    pub h: usize,
    pub w: usize,
    pub class: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Vec<FeatureGrid>,
    pub test: Vec<FeatureGrid>,
    pub train_planted: Vec<Vec<PlantedCell>>,
    pub test_planted: Vec<Vec<PlantedCell>>,
    pub bank: TextBank,
    /// Orthonormal `u_j`, N×d.
    pub prototypes: DenseArray<f64>,
    /// Entangled unit `v_j`, N×d.
    pub entangled: DenseArray<f64>,
    pub rho: f64,
    /// Mean off-diagonal |cosine| over the emitted positive text rows.
    pub mean_similarity: f64,
}

/// Pairwise cosine of `v_i`, `v_j` for `n` prototypes at entanglement `rho`.
pub fn entangled_similarity(rho: f64, n: usize) -> f64 {
    let c = 2.0 * rho * (1.0 - rho) / (n as f64).sqrt();
    let cross = c + rho * rho;
    cross / ((1.0 - rho) * (1.0 - rho) + cross)
}

/// Inverts [`entangled_similarity`] by bisection on `[0, 1)`.
pub fn rho_for_similarity(target: f64, n: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&target) || n < 2 {
        return Err(Error::Config(format!(
            "similarity target {target} unreachable with {n} classes"
        )));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if entangled_similarity(mid, n) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn orthonormal_rows(n: usize, d: usize, rng: &mut XorShift64Star) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        // Two Gram–Schmidt passes keep the set orthonormal to machine precision.
        for _ in 0..2 {
            for r in &rows {
                let p = dot(&v, r);
                v.iter_mut().zip(r).for_each(|(x, y)| *x -= p * y);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
    }
    rows
}

fn noisy(v: &[f64], sigma: f64, rng: &mut XorShift64Star) -> Vec<f32> {
    let s = sigma / (v.len() as f64).sqrt();
    v.iter().map(|&x| (x + s * rng.normal()) as f32).collect()
}

fn mean_abs_offdiag_cos(rows: &[Vec<f32>]) -> f64 {
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let mut v: Vec<f64> = r.iter().map(|&x| x as f64).collect();
            normalize(&mut v);
            v
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..unit.len() {
        for j in i + 1..unit.len() {
            total += dot(&unit[i], &unit[j]).abs();
            pairs += 1;
        }
    }
    total / pairs as f64
}

fn sample_images(
    spec: &SyntheticSpec,
    entangled: &[Vec<f64>],
    count: usize,
    prefix: &str,
    rng: &mut XorShift64Star,
) -> Result<(Vec<FeatureGrid>, Vec<Vec<PlantedCell>>)> {
    let (h, w) = spec.grid;
    let (n, d) = (spec.n_classes, spec.d);
    let (lo, hi) = spec.labels_per_image;
    let clutter = 1.0 / (d as f64).sqrt();
    let mut records = Vec::with_capacity(count);
    let mut planted_all = Vec::with_capacity(count);
    let mut classes: Vec<usize> = (0..n).collect();
    let mut cells: Vec<usize> = (0..h * w).collect();
    for i in 0..count {
        let k = lo + rng.below(hi - lo + 1);
        // Partial Fisher–Yates: the first k entries become the draw.
        for s in 0..k {
            classes.swap(s, s + rng.below(n - s));
            cells.swap(s, s + rng.below(h * w - s));
        }
        let mut values = vec![0.0f32; h * w * d];
        let mut labels = vec![0u8; n];
        let mut planted = Vec::with_capacity(k);
        for cell in 0..h * w {
            let slot = &mut values[cell * d..(cell + 1) * d];
            match cells[..k].iter().position(|&c| c == cell) {
                Some(s) => {
                    let class = classes[s];
                    labels[class] = 1;
                    planted.push(PlantedCell {
                        h: cell / w,
                        w: cell % w,
                        class,
                    });
                    slot.copy_from_slice(&noisy(&entangled[class], spec.noise_sigma, rng));
                }
                None => {
                    let bg: Vec<f64> = (0..d).map(|_| clutter * rng.normal()).collect();
                    slot.copy_from_slice(&noisy(&bg, spec.noise_sigma, rng));
                }
            }
        }
        planted.sort_by_key(|p| (p.h, p.w));
        records.push(FeatureGrid::new(
            format!("{prefix}{i:05}"),
            h,
            w,
            d,
            values,
            labels,
        )?);
        planted_all.push(planted);
    }
    Ok((records, planted_all))
}

/// Draws a dataset from `spec`. Independent RNG streams feed the prototypes,
/// the text bank, the training images and the test images.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let rho = spec.effective_rho()?;
    let (n, d) = (spec.n_classes, spec.d);

    let protos = orthonormal_rows(n, d, &mut XorShift64Star::derive(spec.seed, 1));
    let mut mean: Vec<f64> = (0..d).map(|c| protos.iter().map(|u| u[c]).sum()).collect();
    normalize(&mut mean);
    let entangled: Vec<Vec<f64>> = protos
        .iter()
        .map(|u| {
            let mut v: Vec<f64> = u
                .iter()
                .zip(&mean)
                .map(|(a, b)| (1.0 - rho) * a + rho * b)
                .collect();
            normalize(&mut v);
            v
        })
        .collect();

    let mut text_rng = XorShift64Star::derive(spec.seed, 2);
    let positive: Vec<Vec<f32>> = entangled
        .iter()
        .map(|v| noisy(v, spec.text_noise, &mut text_rng))
        .collect();
    let negative: Vec<Vec<f32>> = entangled
        .iter()
        .map(|v| {
            let mut neg: Vec<f64> = mean
                .iter()
                .zip(v)
                .map(|(m, x)| m - spec.negative_epsilon * x)
                .collect();
            normalize(&mut neg);
            noisy(&neg, spec.text_noise, &mut text_rng)
        })
        .collect();
    let mean_similarity = mean_abs_offdiag_cos(&positive);
    let bank = TextBank::new(
        (0..n).map(|j| format!("class{j:02}")).collect(),
        DenseArray::new(vec![n, d], positive.concat())?,
        DenseArray::new(vec![n, d], negative.concat())?,
        PromptTemplates::default(),
    )?;

    let (train, train_planted) = sample_images(
        spec,
        &entangled,
        spec.samples,
        "train",
        &mut XorShift64Star::derive(spec.seed, 3),
    )?;
    let (test, test_planted) = sample_images(
        spec,
        &entangled,
        spec.test_samples,
        "test",
        &mut XorShift64Star::derive(spec.seed, 4),
    )?;

    Ok(SyntheticData {
        train,
        test,
        train_planted,
        test_planted,
        bank,
        prototypes: DenseArray::new(vec![n, d], protos.concat())?,
        entangled: DenseArray::new(vec![n, d], entangled.concat())?,
        rho,
        mean_similarity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_classes: 5,
            d: 16,
            grid: (3, 3),
            samples: 20,
            test_samples: 5,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn closed_form_endpoints() {
        assert_eq!(entangled_similarity(0.0, 7), 0.0);
        assert!((entangled_similarity(1.0 - 1e-12, 7) - 1.0).abs() < 1e-9);
        let mut prev = -1.0;
        for i in 0..100 {
            let s = entangled_similarity(i as f64 / 100.0, 20);
            assert!(s > prev);
            prev = s;
        }
    }

    #[test]
    fn closed_form_matches_construction() {
        let spec = SyntheticSpec {
            rho: 0.4,
            target_similarity: None,
            ..small()
        };
        let data = generate_synthetic(&spec).unwrap();
        let v = &data.entangled;
        let expect = entangled_similarity(0.4, 5);
        for i in 0..5 {
            for j in 0..5 {
                let c = dot(v.row(i), v.row(j));
                let want = if i == j { 1.0 } else { expect };
                assert!((c - want).abs() < 1e-12, "{i},{j}: {c} vs {want}");
            }
        }
    }

    #[test]
    fn bisection_hits_target() {
        let rho = rho_for_similarity(0.75, 20).unwrap();
        assert!((entangled_similarity(rho, 20) - 0.75).abs() < 1e-12);
        let data = generate_synthetic(&SyntheticSpec {
            samples: 1,
            test_samples: 1,
            ..SyntheticSpec::default()
        })
        .unwrap();
        assert!((data.mean_similarity - 0.75).abs() < 0.05);
    }

    #[test]
    fn orthonormal_limit() {
        let spec = SyntheticSpec {
            rho: 0.0,
            target_similarity: None,
            ..small()
        };
        let data = generate_synthetic(&spec).unwrap();
        assert!(data.mean_similarity <= 0.05, "{}", data.mean_similarity);
        let p = &data.prototypes;
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot(p.row(i), p.row(j)) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.bank, b.bank);
        let c = generate_synthetic(&SyntheticSpec { seed: 9, ..small() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn labels_match_planted_cells() {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            ..small()
        };
        let data = generate_synthetic(&spec).unwrap();
        for (rec, planted) in data.train.iter().zip(&data.train_planted) {
            let k = rec.labels.iter().filter(|&&l| l == 1).count();
            assert!((1..=3).contains(&k));
            assert_eq!(planted.len(), k);
            for p in planted {
                assert_eq!(rec.labels[p.class], 1);
                let cell: Vec<f64> = rec.location(p.h, p.w).iter().map(|&x| x as f64).collect();
                let best = (0..5)
                    .max_by(|&a, &b| {
                        dot(&cell, data.entangled.row(a))
                            .total_cmp(&dot(&cell, data.entangled.row(b)))
                    })
                    .unwrap();
                assert_eq!(best, p.class);
            }
        }
    }

    #[test]
    fn infeasible_specs() {
        assert!(generate_synthetic(&SyntheticSpec {
            n_classes: 17,
            ..small()
        })
        .is_err());
        assert!(generate_synthetic(&SyntheticSpec {
            rho: 1.0,
            target_similarity: None,
            ..small()
        })
        .is_err());
        assert!(generate_synthetic(&SyntheticSpec {
            labels_per_image: (3, 2),
            ..small()
        })
        .is_err());
    }
}
