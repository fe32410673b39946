//! Subspace affinity maps, data-side losses and numerical bound checks.

mod bounds;

use std::io::Write;

use indexmap::IndexMap;
use serde::Serialize;

use crate::checkpoint::TaskVector;
use crate::error::{Error, Result};
use crate::linalg::{subspace_affinity, svd, top_right_singular_vectors, DenseMatrix, OrthonormalBasis};

pub use bounds::{
    aligned_instance, check_corollary1, check_surrogate_bounds, check_theorem1, check_wedin, check_weyl,
    corollary_bound, verify, AlignedInstance, BoundCheckReport, BoundRecord, CheckKind, SurrogateInstance,
    VerifyConfig, FP_SLACK,
};

/// Top right singular subspace of a representation matrix.
#[derive(Clone, Debug)]
pub struct DataSubspace {
    pub basis: OrthonormalBasis,
    /// Set when fewer than the requested directions exist.
    pub truncated: bool,
}

/// Top-`r_d` right singular vectors of the `N × d_i` representation matrix.
pub fn data_subspace(h: &DenseMatrix, r_d: usize) -> Result<DataSubspace> {
    if r_d == 0 || r_d > h.cols() {
        return Err(Error::InvalidInput(format!(
            "r_d must lie in 1..={}, got {r_d}",
            h.cols()
        )));
    }
    let basis = top_right_singular_vectors(h, r_d)?;
    Ok(DataSubspace {
        truncated: basis.rank() < r_d,
        basis,
    })
}

/// Affinities between data subspaces (rows) and task-vector subspaces
/// (columns), per layer.
#[derive(Clone, Debug, Serialize)]
pub struct AffinityReport {
    pub layers: Vec<String>,
    pub data_tasks: Vec<String>,
    pub vector_tasks: Vec<String>,
    /// `matrices[l][i][j]` = affinity of data task `i` with vector task `j`
    /// on layer `l`.
    pub matrices: Vec<Vec<Vec<f64>>>,
    /// Entry-wise mean over layers.
    pub mean: Vec<Vec<f64>>,
    /// Entry-wise 90th percentile over layers (nearest rank).
    pub p90: Vec<Vec<f64>>,
}

impl AffinityReport {
    pub fn task_count(&self) -> usize {
        self.data_tasks.len()
    }

    /// Diagonal entries over all layers.
    pub fn matched(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for m in &self.matrices {
            for (i, row) in m.iter().enumerate() {
                out.push(row[i]);
            }
        }
        out
    }

    /// Off-diagonal entries over all layers.
    pub fn mismatched(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for m in &self.matrices {
            for (i, row) in m.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    if i != j {
                        out.push(v);
                    }
                }
            }
        }
        out
    }

    /// Smallest gap, over layers and tasks, between a matched affinity and
    /// the largest mismatched affinity in its row or column.
    pub fn dominance_margin(&self) -> f64 {
        let mut worst = f64::INFINITY;
        for m in &self.matrices {
            let n = m.len();
            for i in 0..n {
                let mut rival = f64::NEG_INFINITY;
                for (j, row) in m.iter().enumerate() {
                    if j != i {
                        rival = rival.max(m[i][j]).max(row[i]);
                    }
                }
                worst = worst.min(m[i][i] - rival);
            }
        }
        worst
    }

    /// Every matched affinity strictly exceeds every mismatched affinity
    /// sharing its row or column.
    pub fn diagonally_dominant(&self) -> bool {
        self.task_count() < 2 || self.dominance_margin() > 0.0
    }

    /// Same report with tasks relabelled by `perm` (new index `k` takes old
    /// task `perm[k]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let pick = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            perm.iter().map(|&i| perm.iter().map(|&j| m[i][j]).collect()).collect()
        };
        Self {
            layers: self.layers.clone(),
            data_tasks: perm.iter().map(|&i| self.data_tasks[i].clone()).collect(),
            vector_tasks: perm.iter().map(|&i| self.vector_tasks[i].clone()).collect(),
            matrices: self.matrices.iter().map(pick).collect(),
            mean: pick(&self.mean),
            p90: pick(&self.p90),
        }
    }

    /// CSV rows `(layer, row_task, col_task, value)`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        out.write_record(["layer", "row_task", "col_task", "value"])
            .map_err(csv_err)?;
        for (l, m) in self.layers.iter().zip(&self.matrices) {
            for (i, row) in m.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    out.write_record([
                        l.as_str(),
                        self.data_tasks[i].as_str(),
                        self.vector_tasks[j].as_str(),
                        &v.to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("csv: {e}"))
}

/// Per layer, affinity of data subspace `i` with the top-`r_v` right
/// singular subspace of task vector `j`. Tasks are labelled by index.
pub fn affinity_map(
    data_subspaces: &[IndexMap<String, OrthonormalBasis>],
    task_vectors: &[TaskVector],
    r_v: usize,
) -> Result<AffinityReport> {
    if data_subspaces.len() != task_vectors.len() {
        return Err(Error::InvalidInput(format!(
            "{} data subspaces for {} task vectors",
            data_subspaces.len(),
            task_vectors.len()
        )));
    }
    let Some(first) = task_vectors.first() else {
        return Err(Error::InvalidInput("affinity map needs at least one task".into()));
    };
    let layers: Vec<String> = first.layers.keys().cloned().collect();
    let n = task_vectors.len();
    let mut matrices = Vec::with_capacity(layers.len());
    for layer in &layers {
        let mut vhats = Vec::with_capacity(n);
        for (j, tv) in task_vectors.iter().enumerate() {
            let m = tv
                .layers
                .get(layer)
                .ok_or_else(|| Error::InvalidInput(format!("task vector {j} lacks layer {layer:?}")))?;
            vhats.push(top_right_singular_vectors(m, r_v)?);
        }
        let mut mat = vec![vec![0.0; n]; n];
        for (i, ds) in data_subspaces.iter().enumerate() {
            let vd = ds
                .get(layer)
                .ok_or_else(|| Error::InvalidInput(format!("data task {i} lacks a subspace for layer {layer:?}")))?;
            for (j, vh) in vhats.iter().enumerate() {
                mat[i][j] =
                    subspace_affinity(vd, vh).map_err(|e| e.context(format!("layer {layer:?}, data task {i}")))?;
            }
        }
        matrices.push(mat);
    }
    let reduce = |f: &dyn Fn(&mut Vec<f64>) -> f64| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let mut xs: Vec<f64> = matrices.iter().map(|m| m[i][j]).collect();
                        f(&mut xs)
                    })
                    .collect()
            })
            .collect()
    };
    let mean = reduce(&|xs| xs.iter().sum::<f64>() / xs.len().max(1) as f64);
    let p90 = reduce(&|xs| percentile_nearest_rank(xs, 90.0).unwrap_or(f64::NAN));
    let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
    Ok(AffinityReport {
        layers,
        data_tasks: ids.clone(),
        vector_tasks: ids,
        matrices,
        mean,
        p90,
    })
}

/// Nearest-rank percentile: the smallest value with at least `p%` of the
/// sample at or below it. `None` for an empty sample.
pub fn percentile_nearest_rank(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut xs = values.to_vec();
    xs.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * xs.len() as f64).ceil() as usize;
    Some(xs[rank.clamp(1, xs.len()) - 1])
}

/// Empirical CDF as `(value, cumulative_fraction)` steps at each distinct
/// value.
pub fn ecdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut xs = values.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (k, &x) in xs.iter().enumerate() {
        let frac = (k + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == x => last.1 = frac,
            _ => out.push((x, frac)),
        }
    }
    out
}

pub fn write_ecdf_csv<W: Write>(series: &[(f64, f64)], w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    out.write_record(["value", "cumulative_fraction"]).map_err(csv_err)?;
    for (v, f) in series {
        out.write_record([v.to_string(), f.to_string()]).map_err(csv_err)?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

/// `(1/N)·‖Δ·Xᵀ‖_F²`: mean squared output change over the rows of `X`.
pub fn output_shift(delta: &DenseMatrix, x: &DenseMatrix) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::InvalidInput("feature matrix has no rows".into()));
    }
    if delta.cols() != x.cols() {
        return Err(Error::InvalidInput(format!(
            "update has {} inputs, features have {}",
            delta.cols(),
            x.cols()
        )));
    }
    Ok(delta.matmul_t(x).frobenius_norm_sq() / x.rows() as f64)
}

fn summed_shift(tv: &TaskVector, x: &DenseMatrix) -> Result<f64> {
    let mut total = 0.0;
    for (name, d) in &tv.layers {
        total += output_shift(d, x).map_err(|e| e.context(format!("layer {name:?}")))?;
    }
    Ok(total)
}

/// Output change on earlier tasks' features caused by one merge step
/// (`τ̃_{≤t} − τ̃_{≤t−1}`), summed over layers.
pub fn transparency_loss(merged_delta_step: &TaskVector, x_old: &DenseMatrix) -> Result<f64> {
    summed_shift(merged_delta_step, x_old)
}

/// Output gap between the merged model and the task model on the new
/// task's features (`τ̃_{≤t} − τ_t`), summed over layers.
pub fn fidelity_loss(merged_minus_tau: &TaskVector, x_new: &DenseMatrix) -> Result<f64> {
    summed_shift(merged_minus_tau, x_new)
}

/// Singular values of `m`, padded with zeros to `len`.
pub(crate) fn singular_values(m: &DenseMatrix, len: usize) -> Result<Vec<f64>> {
    let mut s = svd(m)?.singular_values;
    s.resize(len.max(s.len()), 0.0);
    Ok(s)
}
