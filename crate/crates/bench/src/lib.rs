//! Fixtures shared by the benchmarks.

use afr_core::data::{generate_synthetic, SyntheticSpec};
use afr_core::{EmbeddingDataset, LinearHead, Matrix, Rng};

/// Balanced four-group synthetic data of the given size and width.
pub fn synthetic(n: usize, dims: usize, seed: u64) -> EmbeddingDataset {
    generate_synthetic(&SyntheticSpec {
        n_total: n,
        dims,
        group_proportions: vec![0.25; 4],
        core_separation: 1.0,
        spurious_separation: 2.0,
        noise_std: 1.0,
        seed,
    })
    .expect("valid synthetic spec")
}

/// A head with small random weights anchored at itself.
pub fn random_head(classes: usize, dim: usize, seed: u64) -> LinearHead {
    let mut rng = Rng::new(seed);
    let w: Vec<f64> = (0..classes * dim).map(|_| 0.1 * rng.normal()).collect();
    let b: Vec<f64> = (0..classes).map(|_| 0.1 * rng.normal()).collect();
    LinearHead::from_anchor(Matrix::new(classes, dim, w).expect("finite"), b)
        .expect("consistent shapes")
}
