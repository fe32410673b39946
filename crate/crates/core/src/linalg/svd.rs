//! Deterministic thin SVD.
//!
//! The input is first reduced to a square triangular factor with Householder
//! QR (applied to the matrix or its transpose, whichever is tall), then the
//! factor is diagonalized by one-sided Jacobi rotations. The right singular
//! vectors come out of accumulated rotations and stay orthonormal to machine
//! precision regardless of conditioning.

use super::matrix::{dot, norm, DenseMatrix};
use crate::error::{Error, Result};

/// Relative threshold below which a singular value counts as zero.
pub const RANK_TOLERANCE: f64 = 1e-8;

const MAX_SWEEPS: usize = 80;

/// Thin singular value decomposition `M = U · diag(s) · Vᵀ`.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub v: DenseMatrix,
}

impl SvdResult {
    /// Number of singular values above `RANK_TOLERANCE · σ₁`.
    pub fn numerical_rank(&self) -> usize {
        let Some(&s1) = self.singular_values.first() else {
            return 0;
        };
        if s1 <= 0.0 {
            return 0;
        }
        self.singular_values
            .iter()
            .take_while(|&&s| s > RANK_TOLERANCE * s1)
            .count()
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, &s) in self.singular_values.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul_t(&self.v)
    }
}

/// Thin SVD with `k = min(rows, cols)` components, singular values descending.
///
/// Each right singular vector is sign-normalized so that its largest-magnitude
/// entry is positive (lowest index wins ties); the matching left vector is
/// flipped with it.
pub fn svd(m: &DenseMatrix) -> Result<SvdResult> {
    if m.is_empty() {
        return Err(Error::InvalidInput(format!(
            "svd of empty {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    let (rows, cols) = m.shape();
    let (mut u, sigma, mut v) = if rows >= cols {
        // M = Q R, R = Ur S Vᵀ  =>  U = Q Ur
        let (q, r) = householder_qr(&to_columns(m));
        let (sigma, ur, vr) = jacobi(r);
        (mat_columns(&q, &ur), sigma, vr)
    } else {
        // Mᵀ = Q R  =>  M = Rᵀ Qᵀ, Rᵀ = Ur S Vrᵀ  =>  V = Q Vr
        let (q, r) = householder_qr(&to_columns(&m.transpose()));
        let (sigma, ur, vr) = jacobi(transpose_square(&r));
        (ur, sigma, mat_columns(&q, &vr))
    };

    // U columns for negligible sigma carry no information; V columns always do.
    complete_orthonormal(&mut u, &sigma, rows, true);
    complete_orthonormal(&mut v, &sigma, cols, false);

    for j in 0..v.len() {
        if needs_flip(&v[j]) {
            v[j].iter_mut().for_each(|x| *x = -*x);
            u[j].iter_mut().for_each(|x| *x = -*x);
        }
    }

    Ok(SvdResult {
        u: DenseMatrix::from_columns(rows, &u),
        singular_values: sigma,
        v: DenseMatrix::from_columns(cols, &v),
    })
}

/// True when the largest-magnitude entry (first one on ties) is negative.
pub(crate) fn needs_flip(col: &[f64]) -> bool {
    let mut best = 0usize;
    for (i, x) in col.iter().enumerate() {
        if x.abs() > col[best].abs() {
            best = i;
        }
    }
    col.get(best).is_some_and(|&x| x < 0.0)
}

fn to_columns(m: &DenseMatrix) -> Vec<Vec<f64>> {
    m.columns()
}

fn transpose_square(cols: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = cols.len();
    (0..n).map(|j| (0..n).map(|i| cols[i][j]).collect()).collect()
}

/// Columns of `Q · C` where `Q` (m×k) and `C` (k×k) are given column-wise.
fn mat_columns(q: &[Vec<f64>], c: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = q.first().map_or(0, Vec::len);
    c.iter()
        .map(|cc| {
            let mut out = vec![0.0; m];
            for (qk, &w) in q.iter().zip(cc) {
                if w != 0.0 {
                    for (o, &x) in out.iter_mut().zip(qk) {
                        *o += w * x;
                    }
                }
            }
            out
        })
        .collect()
}

/// Thin Householder QR of a tall matrix given by columns (m ≥ n).
/// Returns `(Q, R)` column-wise: Q is m×n, R is n×n upper triangular.
fn householder_qr(a: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = a.len();
    let m = a.first().map_or(0, Vec::len);
    debug_assert!(m >= n);
    let mut cols = a.to_vec();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);

    for k in 0..n {
        let x = &cols[k][k..];
        let xnorm = norm(x);
        let mut v = x.to_vec();
        if xnorm == 0.0 {
            reflectors.push(vec![0.0; m - k]);
            continue;
        }
        let alpha = if v[0] >= 0.0 { -xnorm } else { xnorm };
        v[0] -= alpha;
        let vnorm = norm(&v);
        if vnorm == 0.0 {
            reflectors.push(vec![0.0; m - k]);
            continue;
        }
        v.iter_mut().for_each(|e| *e /= vnorm);
        for col in cols.iter_mut().skip(k) {
            let s = 2.0 * dot(&v, &col[k..]);
            for (c, &vi) in col[k..].iter_mut().zip(&v) {
                *c -= s * vi;
            }
        }
        reflectors.push(v);
    }

    let r: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i <= j { cols[j][i] } else { 0.0 }).collect())
        .collect();

    let mut q: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            e
        })
        .collect();
    for (k, v) in reflectors.iter().enumerate().rev() {
        for col in q.iter_mut() {
            let s = 2.0 * dot(v, &col[k..]);
            if s != 0.0 {
                for (c, &vi) in col[k..].iter_mut().zip(v) {
                    *c -= s * vi;
                }
            }
        }
    }
    (q, r)
}

/// One-sided Jacobi on a square matrix given column-wise.
///
/// Returns `(sigma, U, V)` sorted by descending sigma; U columns for zero
/// singular values are left as zero vectors (completed by the caller).
fn jacobi(mut g: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = g.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = f64::EPSILON * n as f64;

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&g[p], &g[p]);
                let beta = dot(&g[q], &g[q]);
                let gamma = dot(&g[p], &g[q]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut g, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(usize, f64)> = g.iter().map(|c| norm(c)).enumerate().collect();
    // stable: equal norms keep index order
    order.sort_by(|a, b| b.1.total_cmp(&a.1));

    let sigma: Vec<f64> = order.iter().map(|&(_, s)| s).collect();
    let u: Vec<Vec<f64>> = order
        .iter()
        .map(|&(j, s)| {
            if s > 0.0 {
                g[j].iter().map(|x| x / s).collect()
            } else {
                vec![0.0; g[j].len()]
            }
        })
        .collect();
    let v_sorted: Vec<Vec<f64>> = order.iter().map(|&(j, _)| v[j].clone()).collect();
    (sigma, u, v_sorted)
}

#[inline]
fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Re-orthonormalize `cols` in order (modified Gram-Schmidt). Columns whose
/// singular value is negligible (when `replace_negligible`), or which collapse
/// during the sweep, are
/// replaced by the first standard basis vector not yet spanned.
fn complete_orthonormal(cols: &mut [Vec<f64>], sigma: &[f64], dim: usize, replace_negligible: bool) {
    let s1 = sigma.first().copied().unwrap_or(0.0);
    let negligible = |s: f64| replace_negligible && (s1 <= 0.0 || s <= f64::EPSILON * dim as f64 * s1);
    let mut next_candidate = 0usize;
    for j in 0..cols.len() {
        let mut ok = !negligible(sigma[j]);
        if ok {
            let (done, rest) = cols.split_at_mut(j);
            let c = &mut rest[0];
            for _ in 0..2 {
                for prev in done.iter() {
                    let d = dot(prev, c);
                    c.iter_mut().zip(prev).for_each(|(x, p)| *x -= d * p);
                }
            }
            let nrm = norm(c);
            if nrm > 0.5 {
                c.iter_mut().for_each(|x| *x /= nrm);
            } else {
                ok = false;
            }
        }
        if !ok {
            loop {
                assert!(next_candidate < dim, "basis completion exhausted");
                let mut e = vec![0.0; dim];
                e[next_candidate] = 1.0;
                next_candidate += 1;
                for _ in 0..2 {
                    for prev in cols[..j].iter() {
                        let d = dot(prev, &e);
                        e.iter_mut().zip(prev).for_each(|(x, p)| *x -= d * p);
                    }
                }
                let nrm = norm(&e);
                if nrm > 1e-3 {
                    e.iter_mut().for_each(|x| *x /= nrm);
                    cols[j] = e;
                    break;
                }
            }
        }
    }
}
