//! Dense linear algebra: matrix type, SVD, subspaces and projectors.

mod matrix;
mod subspace;
mod svd;

pub use matrix::DenseMatrix;
pub use subspace::{
    complement_projector, max_principal_sine, solve_spd, spectral_norm, subspace_affinity, top_right_singular_vectors,
    OrthonormalBasis,
};
pub use svd::{svd, SvdResult, RANK_TOLERANCE};
