//! Fixtures shared by the criterion benches in `benches/`.

use mergeforge::checkpoint::{Checkpoint, Tensor};
use mergeforge::rng::{gaussian_matrix, stream};
use mergeforge::DenseMatrix;

/// Seeded Gaussian matrix with unit-variance entries.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut rng = stream(seed, &["bench"]);
    gaussian_matrix(&mut rng, rows, cols, 1.0)
}

/// Low-rank update `G·Qᵀ` plus a small dense tail.
pub fn low_rank(rows: usize, cols: usize, rank: usize, seed: u64) -> DenseMatrix {
    let g = random_matrix(rows, rank, seed);
    let q = random_matrix(cols, rank, seed ^ 0x9e37);
    g.matmul_t(&q).add(&random_matrix(rows, cols, seed ^ 0x51).scale(1e-3))
}

/// Checkpoint with `layers` square matrices of side `dim` plus a head.
pub fn checkpoint(layers: usize, dim: usize, seed: u64) -> Checkpoint {
    let mut c = Checkpoint::new();
    for l in 0..layers {
        let m = random_matrix(dim, dim, seed + l as u64);
        c.insert(format!("blocks.{l}.linear.weight"), Tensor::from_matrix(&m))
            .expect("unique name");
    }
    c.insert("head.weight", Tensor::from_matrix(&random_matrix(4, dim, seed)))
        .expect("unique name");
    c
}
