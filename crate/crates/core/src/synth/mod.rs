//! Synthetic continual-merging benchmark.
//!
//! Each task owns an `r_d`-dimensional data subspace. Subspaces are spanned
//! by (signed, weighted) coordinate vectors drawn from a shuffled index pool,
//! which keeps their supports, and hence exact orthogonality in the
//! zero-overlap regime, intact through 32-bit checkpoint storage. Task
//! vectors act only on their task's subspace (plus optional bounded noise),
//! and each task gets a ridge-regression readout fitted on its own features.

mod protocol;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Tensor};
use crate::error::{Error, Result};
use crate::linalg::{solve_spd, top_right_singular_vectors, DenseMatrix};
use crate::rng::{gaussian_matrix, gaussian_vec, stream, SplitMix64, StreamRng};

pub use protocol::{
    evaluate_acc, evaluate_bwt, run_protocol, task_accuracy, write_results_csv, BenchResult, MethodSummary,
    ProtocolResult,
};

pub const HEAD_TENSOR: &str = "head.weight";
pub const NORM_TENSOR: &str = "final_norm.weight";

pub fn layer_name(l: usize) -> String {
    format!("blocks.{l}.linear.weight")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub tasks: usize,
    pub d_i: usize,
    pub d_o: usize,
    /// Samples per task.
    pub n: usize,
    /// Rank of each task's data subspace.
    pub r_d: usize,
    /// Mean squared cosine of the principal angles between any two task
    /// subspaces, in `[0, 1)`.
    pub overlap: f64,
    /// Row-noise bound of the task vectors, relative to `‖T_0‖_F/√d_o`.
    pub noise_scale: f64,
    pub classes: usize,
    /// Standard deviation of class centres (within-class spread is 1).
    pub class_sep: f64,
    /// Entry scale of the pre-trained weights relative to the task vectors.
    pub base_scale: f64,
    /// Number of chained linear layers (1 = a single merged layer).
    pub depth: usize,
    pub ridge: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            tasks: 8,
            d_i: 128,
            d_o: 64,
            n: 256,
            r_d: 8,
            overlap: 0.3,
            noise_scale: 0.0,
            classes: 4,
            class_sep: 1.0,
            base_scale: 0.1,
            depth: 1,
            ridge: 1e-3,
            seed: 0,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.tasks == 0 || self.n == 0 || self.classes < 2 || self.depth == 0 {
            return bad("tasks, n and depth must be ≥ 1 and classes ≥ 2".into());
        }
        if self.r_d == 0 || self.r_d > self.d_o {
            return bad(format!("r_d must lie in 1..=d_o ({}), got {}", self.d_o, self.r_d));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return bad(format!("overlap must lie in [0, 1), got {}", self.overlap));
        }
        let blocks = if self.overlap == 0.0 {
            self.tasks
        } else {
            self.tasks + 1
        };
        if self.r_d * blocks > self.d_i {
            return bad(format!(
                "{} tasks of rank {} need {} input dimensions, d_i = {}",
                self.tasks,
                self.r_d,
                self.r_d * blocks,
                self.d_i
            ));
        }
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("class_sep", self.class_sep),
            ("base_scale", self.base_scale),
            ("ridge", self.ridge),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and ≥ 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// How a task was built.
#[derive(Clone, Debug)]
pub struct ConstructionRecord {
    /// Per layer, the coefficients `B` with `T_0 = B·H`.
    pub b: Vec<DenseMatrix>,
    /// Per layer, the noise term `E`.
    pub e: Vec<DenseMatrix>,
    /// Per layer, the row-noise bounds `Ψ_k`.
    pub psi: Vec<Vec<f64>>,
    /// Orthonormal `d_i × r_d` basis of the task's data subspace.
    pub subspace: DenseMatrix,
    pub overlap: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub id: usize,
    /// `N × d_i` inputs.
    pub h: DenseMatrix,
    pub labels: Vec<usize>,
    /// Base weights plus this task's update on every chain layer.
    pub theta: Checkpoint,
    /// `C × d_o` readout, never merged.
    pub head: DenseMatrix,
    pub record: ConstructionRecord,
}

impl SyntheticTask {
    pub fn classes(&self) -> usize {
        self.head.rows()
    }
}

#[derive(Clone, Debug)]
pub struct Suite {
    pub config: SuiteConfig,
    pub base: Checkpoint,
    pub tasks: Vec<SyntheticTask>,
}

impl Suite {
    pub fn layer_names(&self) -> Vec<String> {
        (0..self.config.depth).map(layer_name).collect()
    }

    pub fn thetas(&self) -> Vec<Checkpoint> {
        self.tasks.iter().map(|t| t.theta.clone()).collect()
    }

    /// Representations entering each chain layer under the base weights.
    pub fn layer_inputs(&self, task: usize) -> Result<Vec<DenseMatrix>> {
        let mut x = self.tasks[task].h.clone();
        let mut out = Vec::with_capacity(self.config.depth);
        for name in self.layer_names() {
            out.push(x.clone());
            x = x.matmul_t(&self.base.matrix(&name)?);
        }
        Ok(out)
    }
}

/// Round through 32-bit storage so the in-memory truth equals what a
/// checkpoint holds.
fn storage_round(m: &DenseMatrix) -> DenseMatrix {
    m.map(|x| f64::from(x as f32))
}

/// Orthonormal basis `u_k = a·e_{c_k} + b·e_{p_k}` with `a² = √ω`,
/// `b² = 1 − √ω`, so two tasks sharing the `c` coordinates meet at principal
/// angles with `cos² = ω`.
fn task_basis(d_i: usize, shared: &[usize], own: &[usize], overlap: f64, signs: &[f64]) -> DenseMatrix {
    let a = overlap.sqrt().sqrt();
    let b = (1.0 - overlap.sqrt()).sqrt();
    let mut u = DenseMatrix::zeros(d_i, own.len());
    for k in 0..own.len() {
        if overlap > 0.0 {
            u[(shared[k], k)] = a;
        }
        u[(own[k], k)] = b * signs[k];
    }
    u
}

fn random_rows_with_bounds(rng: &mut StreamRng, rows: usize, cols: usize, row_scale: f64) -> (DenseMatrix, Vec<f64>) {
    let mut e = DenseMatrix::zeros(rows, cols);
    let mut psi = Vec::with_capacity(rows);
    for k in 0..rows {
        let p = row_scale * rng.random_range(0.5..=1.0);
        let dir = gaussian_vec(rng, cols);
        let len = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (slot, x) in e.row_mut(k).iter_mut().zip(&dir) {
            *slot = p * x / len;
        }
        psi.push(p);
    }
    (e, psi)
}

/// Ridge readout `C × d_o` fitted on feature rows `F` (`N × d_o`).
pub fn fit_head(features: &DenseMatrix, labels: &[usize], classes: usize, ridge: f64) -> Result<DenseMatrix> {
    let d = features.cols();
    let mut gram = features.t_matmul(features);
    for i in 0..d {
        gram[(i, i)] += ridge.max(1e-12);
    }
    let mut targets = DenseMatrix::zeros(features.rows(), classes);
    for (n, &y) in labels.iter().enumerate() {
        targets[(n, y)] = 1.0;
    }
    let rhs = features.t_matmul(&targets);
    Ok(solve_spd(&gram, &rhs)?.transpose())
}

pub fn generate_suite(config: &SuiteConfig) -> Result<Suite> {
    config.validate()?;
    let c = config;
    let mut rng = stream(c.seed, &["suite"]);

    let mut pool: Vec<usize> = (0..c.d_i).collect();
    pool.shuffle(&mut rng);
    let (shared, rest) = if c.overlap > 0.0 {
        pool.split_at(c.r_d)
    } else {
        pool.split_at(0)
    };

    // Base weights; the first layer is stored in 32-bit precision as-is.
    let mut base = Checkpoint::new()
        .with_meta("model_id", format!("synthetic-base-{}", c.seed))
        .with_meta("producer", "mergeforge-synth");
    let mut base_layers = Vec::with_capacity(c.depth);
    for l in 0..c.depth {
        let rows = if l + 1 == c.depth { c.d_o } else { c.d_i };
        let noise = gaussian_matrix(&mut rng, rows, c.d_i, c.base_scale / (c.d_i as f64).sqrt());
        let w = if l + 1 == c.depth {
            noise
        } else {
            DenseMatrix::identity(c.d_i).add(&noise)
        };
        let w = storage_round(&w);
        base.insert(layer_name(l), Tensor::from_matrix(&w))?;
        base_layers.push(w);
    }
    base.insert(NORM_TENSOR, Tensor::new(vec![c.d_o], vec![1.0; c.d_o])?)?;
    base.insert(HEAD_TENSOR, Tensor::zeros(vec![c.classes, c.d_o]))?;

    let mut tasks = Vec::with_capacity(c.tasks);
    for t in 0..c.tasks {
        let mut trng = stream(c.seed, &["task", &t.to_string()]);
        let own = &rest[t * c.r_d..(t + 1) * c.r_d];
        let signs: Vec<f64> = (0..c.r_d)
            .map(|_| if trng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        let u = task_basis(c.d_i, shared, own, c.overlap, &signs);

        // Inputs: class centres plus unit within-class spread, in subspace
        // coordinates.
        let centres = gaussian_matrix(&mut trng, c.classes, c.r_d, c.class_sep);
        let labels: Vec<usize> = (0..c.n).map(|i| i % c.classes).collect();
        let mut coords = gaussian_matrix(&mut trng, c.n, c.r_d, 1.0);
        for (i, &y) in labels.iter().enumerate() {
            for k in 0..c.r_d {
                coords[(i, k)] += centres[(y, k)];
            }
        }
        let h = coords.matmul_t(&u);

        let mut theta = base.clone();
        theta
            .meta_mut()
            .insert("model_id".into(), format!("synthetic-task-{t}"));
        let mut record = ConstructionRecord {
            b: Vec::new(),
            e: Vec::new(),
            psi: Vec::new(),
            subspace: u.clone(),
            overlap: c.overlap,
        };
        let mut layer_in = u.clone();
        let mut updated = Vec::with_capacity(c.depth);
        for (l, w0) in base_layers.iter().enumerate() {
            let rows = w0.rows();
            // Acting directions of this layer: the task subspace carried
            // through the preceding base layers.
            let q = if l == 0 {
                layer_in.clone()
            } else {
                top_right_singular_vectors(&layer_in.transpose(), c.r_d)?.into_columns()
            };
            let gain = if l + 1 == c.depth { 1.0 } else { 0.1 };
            let g = gaussian_matrix(&mut trng, rows, q.cols(), gain / (q.cols() as f64).sqrt());
            let t0 = g.matmul_t(&q);
            let (e, psi) = if c.noise_scale > 0.0 {
                let row_scale = c.noise_scale * t0.frobenius_norm() / (rows as f64).sqrt();
                random_rows_with_bounds(&mut trng, rows, w0.cols(), row_scale)
            } else {
                (DenseMatrix::zeros(rows, w0.cols()), vec![0.0; rows])
            };
            let w = storage_round(&w0.add(&t0).add(&e));
            theta.set_matrix(&layer_name(l), &w)?;
            // T_0 = B·H with H the layer's inputs: B = T_0·H⁺.
            let inputs = if l == 0 {
                h.clone()
            } else {
                h.matmul_t(&chain(&base_layers[..l]))
            };
            record.b.push(t0.matmul(&pseudo_inverse(&inputs)?));
            record.e.push(e);
            record.psi.push(psi);
            layer_in = w0.matmul(&layer_in);
            updated.push(w);
        }

        let features = h.matmul_t(&chain(&updated));
        let head = fit_head(&features, &labels, c.classes, c.ridge)?;
        theta.set_matrix(HEAD_TENSOR, &storage_round(&head))?;
        tasks.push(SyntheticTask {
            id: t,
            h,
            labels,
            theta,
            head,
            record,
        });
    }
    Ok(Suite {
        config: config.clone(),
        base,
        tasks,
    })
}

/// `W_{L−1}·…·W_0`.
pub fn chain(layers: &[DenseMatrix]) -> DenseMatrix {
    let mut it = layers.iter();
    let first = it.next().expect("non-empty chain").clone();
    it.fold(first, |acc, w| w.matmul(&acc))
}

/// Moore–Penrose pseudo-inverse via the SVD.
pub fn pseudo_inverse(m: &DenseMatrix) -> Result<DenseMatrix> {
    let s = crate::linalg::svd(m)?;
    let k = s.numerical_rank();
    let mut vs = s.v.leading_columns(k);
    for i in 0..vs.rows() {
        for j in 0..k {
            vs[(i, j)] /= s.singular_values[j];
        }
    }
    Ok(vs.matmul_t(&s.u.leading_columns(k)))
}

/// Fisher–Yates shuffle of `0..T` driven by SplitMix64 seeded with `seed`:
/// for `i` from `T−1` down to 1, swap `i` with a uniform `j ∈ [0, i]`.
pub fn task_order(t: usize, seed: u64) -> Vec<usize> {
    let mut g = SplitMix64::new(seed);
    let mut order: Vec<usize> = (0..t).collect();
    for i in (1..t).rev() {
        let j = g.below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
    order
}

/// Instance for the adapter-efficacy check: a previous cumulative update
/// and a new task vector whose fidelity residual is reachable by a rank-`r_v`
/// correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualConfig {
    pub d_o: usize,
    pub d_i: usize,
    /// Rank of the previous cumulative update.
    pub r_prev: usize,
    /// Rank of the new task vector.
    pub r_task: usize,
    /// Scale of the previous update relative to the new task vector.
    pub prev_scale: f64,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self {
            d_o: 32,
            d_i: 64,
            r_prev: 8,
            r_task: 4,
            prev_scale: 0.3,
        }
    }
}

/// `(τ̃_{≤t−1}, τ_t)` with `d_o ≤ d_i`, so every fidelity residual lies in
/// the column space of `τ_t`.
pub fn recoverable_residual_instance(cfg: &ResidualConfig, seed: u64) -> Result<(DenseMatrix, DenseMatrix)> {
    if cfg.d_o > cfg.d_i || cfg.r_prev + cfg.r_task > cfg.d_i || cfg.r_task == 0 {
        return Err(Error::InvalidConfig(
            "need d_o ≤ d_i, r_prev + r_task ≤ d_i and r_task ≥ 1".into(),
        ));
    }
    let mut rng = stream(seed, &["recoverable"]);
    let q = top_right_singular_vectors(&gaussian_matrix(&mut rng, cfg.d_i, cfg.d_i, 1.0), cfg.d_i)?.into_columns();
    let q_prev = q.column_block(0, cfg.r_prev);
    let q_task = q.column_block(cfg.r_prev, cfg.r_prev + cfg.r_task);
    let s = 1.0 / (cfg.d_i as f64).sqrt();
    let tau_cum = gaussian_matrix(&mut rng, cfg.d_o, cfg.r_prev, cfg.prev_scale * s).matmul_t(&q_prev);
    // Strong rank-r_task part plus a weak full-rank tail so τ_t has full
    // row rank.
    let tau_t = gaussian_matrix(&mut rng, cfg.d_o, cfg.r_task, s)
        .matmul_t(&q_task)
        .add(&tau_cum.scale(0.5))
        .add(&gaussian_matrix(&mut rng, cfg.d_o, cfg.d_i, 0.1 * s));
    Ok((tau_cum, tau_t))
}

/// Per-layer weights of a checkpoint along the suite's chain.
pub(crate) fn chain_weights(ckpt: &Checkpoint, depth: usize) -> Result<Vec<DenseMatrix>> {
    (0..depth).map(|l| ckpt.matrix(&layer_name(l))).collect()
}

/// Weights along the chain taken from merged layers where available.
pub(crate) fn chain_from_layers(
    merged: &IndexMap<String, DenseMatrix>,
    fallback: &Checkpoint,
    depth: usize,
) -> Result<Vec<DenseMatrix>> {
    (0..depth)
        .map(|l| {
            let name = layer_name(l);
            match merged.get(&name) {
                Some(m) => Ok(m.clone()),
                None => fallback.matrix(&name),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{subspace_affinity, OrthonormalBasis};

    fn small(overlap: f64, noise: f64) -> SuiteConfig {
        SuiteConfig {
            tasks: 4,
            d_i: 40,
            d_o: 16,
            n: 64,
            r_d: 4,
            overlap,
            noise_scale: noise,
            ..SuiteConfig::default()
        }
    }

    #[test]
    fn task_order_examples() {
        assert_eq!(task_order(1, 42), vec![0]);
        assert_eq!(task_order(8, 42), task_order(8, 42));
        let mut p = task_order(8, 43);
        p.sort();
        assert_eq!(p, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn infeasible_orthogonal_regime() {
        let mut c = small(0.0, 0.0);
        c.d_i = 15;
        assert!(matches!(generate_suite(&c), Err(Error::InvalidConfig(_))));
        let mut c = small(0.3, 0.0);
        c.d_i = 16;
        assert!(generate_suite(&c).is_err());
    }

    #[test]
    fn subspace_overlap_matches_target() {
        for overlap in [0.0, 0.1, 0.3, 0.5] {
            let suite = generate_suite(&small(overlap, 0.0)).unwrap();
            for a in &suite.tasks {
                let va = OrthonormalBasis::new(a.record.subspace.clone()).unwrap();
                for b in &suite.tasks {
                    let vb = OrthonormalBasis::new(b.record.subspace.clone()).unwrap();
                    let aff = subspace_affinity(&va, &vb).unwrap();
                    let want = if a.id == b.id { 1.0 } else { overlap };
                    assert!((aff - want).abs() < 1e-12, "{overlap}: {aff}");
                }
            }
        }
    }

    #[test]
    fn labels_balanced_and_heads_fit() {
        let suite = generate_suite(&small(0.3, 0.0)).unwrap();
        for t in &suite.tasks {
            let mut counts = vec![0usize; t.classes()];
            for &y in &t.labels {
                counts[y] += 1;
            }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1);
            let acc = task_accuracy(t, &chain_weights(&t.theta, 1).unwrap()).unwrap();
            assert!(acc > 0.5, "individual accuracy {acc}");
        }
    }

    #[test]
    fn construction_decomposes_task_vectors() {
        let suite = generate_suite(&small(0.2, 0.05)).unwrap();
        let w0 = suite.base.matrix(&layer_name(0)).unwrap();
        for t in &suite.tasks {
            let tau = t.theta.matrix(&layer_name(0)).unwrap().sub(&w0);
            let rebuilt = t.record.b[0].matmul(&t.h).add(&t.record.e[0]);
            assert!(tau.sub(&rebuilt).max_abs() < 1e-5);
            for (k, &p) in t.record.psi[0].iter().enumerate() {
                let row = t.record.e[0].row(k);
                assert!(row.iter().map(|x| x * x).sum::<f64>().sqrt() <= p * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_suite(&small(0.3, 0.1)).unwrap();
        let b = generate_suite(&small(0.3, 0.1)).unwrap();
        for (x, y) in a.tasks.iter().zip(&b.tasks) {
            assert_eq!(x.theta, y.theta);
            assert_eq!(x.h, y.h);
        }
    }

    #[test]
    fn chain_mode_builds() {
        let mut c = small(0.2, 0.0);
        c.depth = 3;
        let suite = generate_suite(&c).unwrap();
        assert_eq!(suite.layer_names().len(), 3);
        assert_eq!(suite.layer_inputs(0).unwrap().len(), 3);
        for t in &suite.tasks {
            let acc = task_accuracy(t, &chain_weights(&t.theta, 3).unwrap()).unwrap();
            assert!(acc > 0.5);
        }
    }
}
