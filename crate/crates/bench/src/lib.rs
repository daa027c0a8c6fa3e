//! Shared fixtures for the benchmarks in `benches/`.

use disentangle_core::{
    generate_synthetic, DenseArray, SyntheticData, SyntheticSpec, XorShift64Star,
};

/// Uniform `[-1, 1)` matrix.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseArray<f32> {
    let mut rng = XorShift64Star::new(seed);
    let values = (0..rows * cols)
        .map(|_| rng.uniform(-1.0, 1.0) as f32)
        .collect();
    DenseArray::new(vec![rows, cols], values).expect("shape matches length")
}

/// Unit-norm rows, as produced by the projectors.
pub fn unit_rows(rows: usize, cols: usize, seed: u64) -> DenseArray<f32> {
    let m = random_matrix(rows, cols, seed);
    disentangle_core::diffmath::l2_normalize(&m, 1).expect("nonzero rows")
}

/// Scores in `[0, 1)` with roughly `positive_rate` positives, weakly
/// correlated with the labels.
pub fn ranking_case(n: usize, positive_rate: f64, seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = XorShift64Star::new(seed);
    (0..n)
        .map(|_| {
            let y = u8::from(rng.next_f64() < positive_rate);
            (
                0.5 * rng.next_f64() + 0.5 * f64::from(y) * rng.next_f64(),
                y,
            )
        })
        .unzip()
}

/// The synthetic task at its default size.
pub fn synthetic(samples: usize) -> SyntheticData {
    generate_synthetic(&SyntheticSpec {
        samples,
        test_samples: 1,
        ..SyntheticSpec::default()
    })
    .expect("default spec is valid")
}
