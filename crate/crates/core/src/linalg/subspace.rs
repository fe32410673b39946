use super::matrix::DenseMatrix;
use super::svd::{svd, SvdResult};
use crate::error::{Error, Result};

/// A `dim × rank` matrix with orthonormal columns.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthonormalBasis {
    dim: usize,
    columns: DenseMatrix,
}

impl OrthonormalBasis {
    /// Wrap a matrix whose columns are already orthonormal (checked to 1e-8).
    pub fn new(columns: DenseMatrix) -> Result<Self> {
        let gram = columns.t_matmul(&columns);
        let err = gram.sub(&DenseMatrix::identity(columns.cols())).frobenius_norm();
        if err > 1e-8 {
            return Err(Error::InvalidInput(format!(
                "columns are not orthonormal (‖CᵀC − I‖ = {err:.3e})"
            )));
        }
        Ok(Self {
            dim: columns.rows(),
            columns,
        })
    }

    pub(crate) fn from_trusted(columns: DenseMatrix) -> Self {
        Self {
            dim: columns.rows(),
            columns,
        }
    }

    /// Rank-0 basis in `R^dim`.
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            columns: DenseMatrix::zeros(dim, 0),
        }
    }

    /// Basis from the given standard unit vectors.
    pub fn standard(dim: usize, indices: &[usize]) -> Self {
        let mut c = DenseMatrix::zeros(dim, indices.len());
        for (j, &i) in indices.iter().enumerate() {
            c[(i, j)] = 1.0;
        }
        Self::from_trusted(c)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.columns.cols()
    }

    pub fn columns(&self) -> &DenseMatrix {
        &self.columns
    }

    pub fn into_columns(self) -> DenseMatrix {
        self.columns
    }

    /// Concatenate two bases column-wise. The result is generally *not*
    /// orthonormal, so it is returned as a plain matrix.
    pub fn hcat(&self, other: &OrthonormalBasis) -> DenseMatrix {
        self.columns.hcat(&other.columns)
    }

    /// `M · (I − V·Vᵀ)` computed as `M − (M·V)·Vᵀ`.
    pub fn remove_from_rows(&self, m: &DenseMatrix) -> DenseMatrix {
        if self.rank() == 0 {
            return m.clone();
        }
        let mv = m.matmul(&self.columns);
        m.sub(&mv.matmul_t(&self.columns))
    }
}

/// Top `min(r, numerical_rank(M))` right singular vectors of `M`.
pub fn top_right_singular_vectors(m: &DenseMatrix, r: usize) -> Result<OrthonormalBasis> {
    let s = svd(m)?;
    Ok(truncate_right(&s, r))
}

pub(crate) fn truncate_right(s: &SvdResult, r: usize) -> OrthonormalBasis {
    let k = r.min(s.numerical_rank());
    OrthonormalBasis::from_trusted(s.v.leading_columns(k))
}

/// `I − V·Vᵀ`.
pub fn complement_projector(basis: &OrthonormalBasis) -> DenseMatrix {
    let mut p = DenseMatrix::identity(basis.dim());
    if basis.rank() > 0 {
        p.axpy(-1.0, &basis.columns.matmul_t(&basis.columns));
    }
    p
}

/// `(1/r_d)·‖V̂ᵀ·V_d‖_F²` where `r_d = rank(V_d)`.
pub fn subspace_affinity(v_data: &OrthonormalBasis, v_hat: &OrthonormalBasis) -> Result<f64> {
    if v_data.dim() != v_hat.dim() {
        return Err(Error::InvalidInput(format!(
            "ambient dimensions differ ({} vs {})",
            v_data.dim(),
            v_hat.dim()
        )));
    }
    if v_data.rank() == 0 {
        return Err(Error::InvalidInput(
            "affinity undefined for a rank-0 data subspace".into(),
        ));
    }
    if v_hat.rank() == 0 {
        return Ok(0.0);
    }
    let overlap = v_hat.columns.t_matmul(&v_data.columns).frobenius_norm_sq();
    Ok((overlap / v_data.rank() as f64).clamp(0.0, 1.0))
}

/// Largest singular value.
pub fn spectral_norm(m: &DenseMatrix) -> Result<f64> {
    Ok(svd(m)?.singular_values.first().copied().unwrap_or(0.0))
}

/// Sine of the largest principal angle between two subspaces of equal rank.
pub fn max_principal_sine(a: &OrthonormalBasis, b: &OrthonormalBasis) -> Result<f64> {
    if a.dim() != b.dim() || a.rank() != b.rank() {
        return Err(Error::InvalidInput(
            "principal angles need equal dimension and rank".into(),
        ));
    }
    if a.rank() == 0 {
        return Ok(0.0);
    }
    let residual = b.remove_from_rows(&a.columns.transpose());
    Ok(spectral_norm(&residual)?.min(1.0))
}

/// Solve `A X = B` for symmetric positive definite `A` by Cholesky.
pub fn solve_spd(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(Error::InvalidInput("solve_spd shape mismatch".into()));
    }
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::numerical(
                "cholesky",
                format!("matrix not positive definite at pivot {j}"),
            ));
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}
