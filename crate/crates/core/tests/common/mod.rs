#![allow(dead_code)]

use mergeforge::rng::{gaussian_matrix, stream};
use mergeforge::DenseMatrix;
use nalgebra::DMatrix;

pub fn rand_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    gaussian_matrix(&mut stream(seed, &["test"]), rows, cols, 1.0)
}

pub fn to_na(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_na(m: &DMatrix<f64>) -> DenseMatrix {
    DenseMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Random orthogonal `n×n` matrix from the QR factor of a Gaussian draw.
pub fn rand_orthogonal(n: usize, seed: u64) -> DenseMatrix {
    let q = to_na(&rand_matrix(n, n, seed)).qr().q();
    from_na(&q)
}

/// `n×k` matrix with orthonormal columns.
pub fn rand_orthonormal(n: usize, k: usize, seed: u64) -> DenseMatrix {
    rand_orthogonal(n, seed).leading_columns(k)
}

pub fn max_abs_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Row-loop matrix product, kept deliberately naive.
pub fn naive_matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    assert_eq!(a.cols(), b.rows());
    DenseMatrix::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum()
    })
}
