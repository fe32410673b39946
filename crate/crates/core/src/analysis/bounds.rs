//! Numerical oracles for the subspace-alignment bound, its data-free
//! corollary, and the two perturbation inequalities behind them.

use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{csv_err, singular_values};
use crate::error::{Error, Result};
use crate::linalg::{
    max_principal_sine, spectral_norm, subspace_affinity, svd, top_right_singular_vectors, DenseMatrix,
    OrthonormalBasis,
};
use crate::nuwa::{nuwa_layer, Ablation, NuwaConfig};
use crate::rng::{derive_seed, gaussian_matrix, gaussian_vec, stream, StreamRng};

/// Relative floating-point slack: a record violates when
/// `lhs > rhs + FP_SLACK·(1 + |rhs|)`.
pub const FP_SLACK: f64 = 1e-9;

const MAX_RETRIES: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundRecord {
    pub instance_seed: u64,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs − lhs`.
    pub margin: f64,
}

impl BoundRecord {
    pub fn new(instance_seed: u64, lhs: f64, rhs: f64) -> Self {
        Self {
            instance_seed,
            lhs,
            rhs,
            margin: rhs - lhs,
        }
    }

    pub fn violated(&self) -> bool {
        let bound = self.rhs + FP_SLACK * (1.0 + self.rhs.abs());
        // NaN on either side counts as a violation.
        self.lhs.partial_cmp(&bound).is_none_or(|o| o.is_gt())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundCheckReport {
    pub check: String,
    /// Instances evaluated (skipped ones excluded).
    pub instances: usize,
    /// Instances whose preconditions could not be met.
    pub skipped: usize,
    pub violations: usize,
    /// Smallest margin over all records (negative when violated).
    pub worst_margin: Option<f64>,
    pub mean_margin: Option<f64>,
    pub max_margin: Option<f64>,
    pub config: serde_json::Value,
    pub records: Vec<BoundRecord>,
}

impl BoundCheckReport {
    pub fn from_records(
        check: &str,
        instances: usize,
        skipped: usize,
        records: Vec<BoundRecord>,
        config: serde_json::Value,
    ) -> Self {
        let violations = records.iter().filter(|r| r.violated()).count();
        let margins: Vec<f64> = records.iter().map(|r| r.margin).collect();
        let (worst, mean, max) = if margins.is_empty() {
            (None, None, None)
        } else {
            (
                Some(margins.iter().copied().fold(f64::INFINITY, f64::min)),
                Some(margins.iter().sum::<f64>() / margins.len() as f64),
                Some(margins.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
            )
        };
        Self {
            check: check.to_string(),
            instances,
            skipped,
            violations,
            worst_margin: worst,
            mean_margin: mean,
            max_margin: max,
            config,
            records,
        }
    }

    fn skipped_instance(check: &str, config: serde_json::Value) -> Self {
        Self::from_records(check, 0, 1, Vec::new(), config)
    }

    /// Pool several reports of the same check; records are ordered by
    /// instance seed.
    pub fn combine(check: &str, parts: Vec<BoundCheckReport>, config: serde_json::Value) -> Self {
        let instances = parts.iter().map(|p| p.instances).sum();
        let skipped = parts.iter().map(|p| p.skipped).sum();
        let mut records: Vec<BoundRecord> = parts.into_iter().flat_map(|p| p.records).collect();
        records.sort_by_key(|r| r.instance_seed);
        Self::from_records(check, instances, skipped, records, config)
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    /// CSV rows `(instance_seed, lhs, rhs, margin)`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        out.write_record(["instance_seed", "lhs", "rhs", "margin"])
            .map_err(csv_err)?;
        for r in &self.records {
            out.write_record([
                r.instance_seed.to_string(),
                r.lhs.to_string(),
                r.rhs.to_string(),
                r.margin.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }
}

/// A task vector built as `T_0 + E` with `T_0 = B·H` of rank `r_d` and
/// row-wise bounded noise `‖E_k‖ ≤ Ψ_k`.
#[derive(Clone, Debug)]
pub struct AlignedInstance {
    /// `N × d_i` representations of rank `r_d`.
    pub h: DenseMatrix,
    pub v_data: OrthonormalBasis,
    pub t0: DenseMatrix,
    pub e: DenseMatrix,
    pub psi: Vec<f64>,
    /// `σ_{r_d}(T_0)`.
    pub sigma_rd: f64,
    /// Alignment radius; misalignment is bounded by its square.
    pub zeta: f64,
}

impl AlignedInstance {
    pub fn tau(&self) -> DenseMatrix {
        self.t0.add(&self.e)
    }

    pub fn r_d(&self) -> usize {
        self.v_data.rank()
    }
}

/// Draw one instance; `None` when the draw misses the stability condition
/// `σ_{r_d}(T_0) > √d_o·max Ψ`.
pub fn aligned_instance(
    d_o: usize,
    d_i: usize,
    n: usize,
    r_d: usize,
    noise_scale: f64,
    rng: &mut StreamRng,
) -> Result<Option<AlignedInstance>> {
    if r_d == 0 || r_d > d_i || r_d > d_o || r_d > n {
        return Err(Error::InvalidInput(format!(
            "need 1 ≤ r_d ≤ min(d_o, d_i, N); got r_d={r_d}, d_o={d_o}, d_i={d_i}, N={n}"
        )));
    }
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "noise_scale must be ≥ 0, got {noise_scale}"
        )));
    }
    let q = top_right_singular_vectors(&gaussian_matrix(rng, r_d, d_i, 1.0), r_d)?;
    let h = gaussian_matrix(rng, n, r_d, 1.0).matmul_t(q.columns());
    let b = gaussian_matrix(rng, d_o, n, 1.0 / (n as f64).sqrt());
    let t0 = b.matmul(&h);
    let sv = svd(&t0)?;
    if sv.numerical_rank() < r_d {
        return Ok(None);
    }
    let sigma_rd = sv.singular_values[r_d - 1];
    let v_data = top_right_singular_vectors(&h, r_d)?;
    if v_data.rank() < r_d {
        return Ok(None);
    }

    let row_scale = noise_scale * t0.frobenius_norm() / (d_o as f64).sqrt();
    let mut psi = Vec::with_capacity(d_o);
    let mut e = DenseMatrix::zeros(d_o, d_i);
    for k in 0..d_o {
        let p = row_scale * rng.random_range(0.5..=1.0);
        let dir = gaussian_vec(rng, d_i);
        let len = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (slot, x) in e.row_mut(k).iter_mut().zip(&dir) {
            *slot = p * x / len;
        }
        psi.push(p);
    }
    let spread = (d_o as f64).sqrt() * psi.iter().copied().fold(0.0, f64::max);
    if sigma_rd <= spread {
        return Ok(None);
    }
    Ok(Some(AlignedInstance {
        h,
        v_data,
        t0,
        e,
        psi,
        sigma_rd,
        zeta: spread / (sigma_rd - spread),
    }))
}

fn draw_aligned(
    d_o: usize,
    d_i: usize,
    n: usize,
    r_d: usize,
    noise_scale: f64,
    seed: u64,
    label: &str,
) -> Result<Option<AlignedInstance>> {
    for attempt in 0..MAX_RETRIES {
        let mut rng = stream(seed, &[label, &attempt.to_string()]);
        if let Some(inst) = aligned_instance(d_o, d_i, n, r_d, noise_scale, &mut rng)? {
            return Ok(Some(inst));
        }
    }
    Ok(None)
}

/// Misalignment `1 − (1/r_d)‖V̂ᵀV_d‖_F²` of the task vector's top-`r_d`
/// right subspace against `ζ²`.
pub fn check_theorem1(
    d_o: usize,
    d_i: usize,
    n: usize,
    r_d: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<BoundCheckReport> {
    let config = serde_json::json!({
        "d_o": d_o, "d_i": d_i, "n": n, "r_d": r_d, "noise_scale": noise_scale, "seed": seed
    });
    let Some(inst) = draw_aligned(d_o, d_i, n, r_d, noise_scale, seed, "theorem1")? else {
        return Ok(BoundCheckReport::skipped_instance("theorem1", config));
    };
    let v_hat = top_right_singular_vectors(&inst.tau(), r_d)?;
    let misalignment = 1.0 - subspace_affinity(&inst.v_data, &v_hat)?;
    let rec = BoundRecord::new(seed, misalignment, inst.zeta * inst.zeta);
    Ok(BoundCheckReport::from_records("theorem1", 1, 0, vec![rec], config))
}

/// `(‖(ρ−τ)Xᵀ‖_F², 2σ₁(X)²(‖(ρ−τ)V̂‖_F² + r_d·ζ²·‖ρ−τ‖₂²))`.
pub fn corollary_bound(
    rho: &DenseMatrix,
    tau: &DenseMatrix,
    x: &DenseMatrix,
    v_hat: &OrthonormalBasis,
    r_d: usize,
    zeta: f64,
) -> Result<(f64, f64)> {
    let diff = rho.sub(tau);
    let lhs = diff.matmul_t(x).frobenius_norm_sq();
    let s1 = spectral_norm(x)?;
    let rhs = 2.0
        * s1
        * s1
        * (diff.matmul(v_hat.columns()).frobenius_norm_sq() + r_d as f64 * zeta * zeta * spectral_norm(&diff)?.powi(2));
    Ok((lhs, rhs))
}

/// Data-free output bound for a random `ρ` around an aligned `τ`, with
/// `V̂` the top-`r_v` right subspace of `τ` (`r_v ≥ r_d`).
pub fn check_corollary1(
    d_o: usize,
    d_i: usize,
    n: usize,
    r_d: usize,
    r_v: usize,
    seed: u64,
) -> Result<BoundCheckReport> {
    check_corollary1_with_noise(d_o, d_i, n, r_d, r_v, 0.05, seed)
}

fn check_corollary1_with_noise(
    d_o: usize,
    d_i: usize,
    n: usize,
    r_d: usize,
    r_v: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<BoundCheckReport> {
    if r_v < r_d {
        return Err(Error::InvalidInput(format!("r_v ({r_v}) must be ≥ r_d ({r_d})")));
    }
    let config = serde_json::json!({
        "d_o": d_o, "d_i": d_i, "n": n, "r_d": r_d, "r_v": r_v,
        "noise_scale": noise_scale, "seed": seed
    });
    let Some(inst) = draw_aligned(d_o, d_i, n, r_d, noise_scale, seed, "corollary1")? else {
        return Ok(BoundCheckReport::skipped_instance("corollary1", config));
    };
    let tau = inst.tau();
    let v_hat = top_right_singular_vectors(&tau, r_v)?;
    let mut rng = stream(seed, &["corollary1-rho"]);
    let scale = rng.random_range(0.01..2.0) * tau.frobenius_norm() / ((d_o * d_i) as f64).sqrt();
    let rho = tau.add(&gaussian_matrix(&mut rng, d_o, d_i, scale));
    let (lhs, rhs) = corollary_bound(&rho, &tau, &inst.h, &v_hat, r_d, inst.zeta)?;
    Ok(BoundCheckReport::from_records(
        "corollary1",
        1,
        0,
        vec![BoundRecord::new(seed, lhs, rhs)],
        config,
    ))
}

/// `max_j |σ_j(A+E) − σ_j(A)|` against `‖E‖₂`.
pub fn check_weyl(a: &DenseMatrix, e: &DenseMatrix, instance_seed: u64) -> Result<BoundCheckReport> {
    if a.shape() != e.shape() {
        return Err(Error::InvalidInput("weyl: A and E differ in shape".into()));
    }
    let k = a.rows().min(a.cols());
    let sa = singular_values(a, k)?;
    let sae = singular_values(&a.add(e), k)?;
    let lhs = sa.iter().zip(&sae).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let rhs = spectral_norm(e)?;
    Ok(BoundCheckReport::from_records(
        "weyl",
        1,
        0,
        vec![BoundRecord::new(instance_seed, lhs, rhs)],
        serde_json::json!({ "shape": [a.rows(), a.cols()] }),
    ))
}

fn leading_left(m: &DenseMatrix, r: usize) -> Result<(OrthonormalBasis, OrthonormalBasis, Vec<f64>)> {
    let s = svd(m)?;
    let u = OrthonormalBasis::new(s.u.leading_columns(r))?;
    let v = OrthonormalBasis::new(s.v.leading_columns(r))?;
    Ok((u, v, s.singular_values))
}

/// Largest principal-angle sine between the top-`r` singular subspaces of
/// `M` and `M + H` (left and right) against `‖H‖₂/Δ`, where
/// `Δ = σ_r(M) − σ_{r+1}(M + H)`. Skipped when `Δ ≤ 0` or `M` has rank
/// below `r`.
pub fn check_wedin(m: &DenseMatrix, h: &DenseMatrix, r: usize, instance_seed: u64) -> Result<BoundCheckReport> {
    if m.shape() != h.shape() {
        return Err(Error::InvalidInput("wedin: M and H differ in shape".into()));
    }
    let k = m.rows().min(m.cols());
    if r == 0 || r > k {
        return Err(Error::InvalidInput(format!("wedin: r must lie in 1..={k}, got {r}")));
    }
    let config = serde_json::json!({ "shape": [m.rows(), m.cols()], "r": r });
    let mh = m.add(h);
    let (u0, v0, sm) = leading_left(m, r)?;
    let (u1, v1, smh) = leading_left(&mh, r)?;
    let next = smh.get(r).copied().unwrap_or(0.0);
    let gap = sm[r - 1] - next;
    let rank_ok = svd(m)?.numerical_rank() >= r;
    if gap <= 0.0 || !rank_ok {
        return Ok(BoundCheckReport::skipped_instance("wedin", config));
    }
    let lhs = max_principal_sine(&u0, &u1)?.max(max_principal_sine(&v0, &v1)?);
    let rhs = spectral_norm(h)? / gap;
    Ok(BoundCheckReport::from_records(
        "wedin",
        1,
        0,
        vec![BoundRecord::new(instance_seed, lhs, rhs)],
        config,
    ))
}

/// Inputs of the two data-free surrogate bounds for one merge step.
#[derive(Clone, Debug)]
pub struct SurrogateInstance {
    /// `τ̃_{≤t}` after the step.
    pub merged: DenseMatrix,
    /// `τ̃_{≤t−1}`.
    pub previous: DenseMatrix,
    pub tau_t: DenseMatrix,
    pub x_old: DenseMatrix,
    pub x_new: DenseMatrix,
    pub v_hat_old: OrthonormalBasis,
    pub v_hat_new: OrthonormalBasis,
    pub r_d_old: usize,
    pub r_d_new: usize,
    pub zeta_old: f64,
    pub zeta_new: f64,
}

/// The transparency bound (step change against old features, old
/// subspace) followed by the fidelity bound (gap to `τ_t` against new
/// features, new subspace).
pub fn check_surrogate_bounds(inst: &SurrogateInstance, instance_seed: u64) -> Result<BoundCheckReport> {
    let (l1, r1) = corollary_bound(
        &inst.merged,
        &inst.previous,
        &inst.x_old,
        &inst.v_hat_old,
        inst.r_d_old,
        inst.zeta_old,
    )?;
    let (l2, r2) = corollary_bound(
        &inst.merged,
        &inst.tau_t,
        &inst.x_new,
        &inst.v_hat_new,
        inst.r_d_new,
        inst.zeta_new,
    )?;
    Ok(BoundCheckReport::from_records(
        "surrogate",
        1,
        0,
        vec![
            BoundRecord::new(instance_seed, l1, r1),
            BoundRecord::new(instance_seed, l2, r2),
        ],
        serde_json::Value::Null,
    ))
}

fn surrogate_instance(cfg: &VerifyConfig, seed: u64) -> Result<Option<SurrogateInstance>> {
    let old = draw_aligned(cfg.d_o, cfg.d_i, cfg.n, cfg.r_d, cfg.noise_scale, seed, "surrogate-old")?;
    let new = draw_aligned(cfg.d_o, cfg.d_i, cfg.n, cfg.r_d, cfg.noise_scale, seed, "surrogate-new")?;
    let (Some(old), Some(new)) = (old, new) else {
        return Ok(None);
    };
    let previous = old.tau();
    let tau_t = new.tau();
    let engine = NuwaConfig {
        r_p: cfg.r_v,
        r_l: 2,
        r_v: cfg.r_v,
        max_iter: 5,
        lr: 1e-2,
        seed,
        ablation: Ablation::Full,
        ..NuwaConfig::default()
    };
    let (merged, _) = nuwa_layer("w", &previous, &tau_t, &engine, 2)?;
    Ok(Some(SurrogateInstance {
        v_hat_old: top_right_singular_vectors(&previous, cfg.r_v)?,
        v_hat_new: top_right_singular_vectors(&tau_t, cfg.r_v)?,
        merged,
        previous,
        tau_t,
        x_old: old.h,
        x_new: new.h,
        r_d_old: cfg.r_d,
        r_d_new: cfg.r_d,
        zeta_old: old.zeta,
        zeta_new: new.zeta,
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Theorem1,
    Corollary1,
    Weyl,
    Wedin,
    Surrogate,
}

impl CheckKind {
    pub const ALL: [CheckKind; 5] = [
        CheckKind::Theorem1,
        CheckKind::Corollary1,
        CheckKind::Weyl,
        CheckKind::Wedin,
        CheckKind::Surrogate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CheckKind::Theorem1 => "theorem1",
            CheckKind::Corollary1 => "corollary1",
            CheckKind::Weyl => "weyl",
            CheckKind::Wedin => "wedin",
            CheckKind::Surrogate => "surrogate",
        }
    }
}

impl FromStr for CheckKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown check {s:?}")))
    }
}

/// Dimensions of randomly drawn verification instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub d_o: usize,
    pub d_i: usize,
    pub n: usize,
    pub r_d: usize,
    pub r_v: usize,
    /// Upper end of the per-instance noise scale for the alignment checks;
    /// the actual scale is drawn uniformly from `[0, noise_scale]`.
    pub noise_scale: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            d_o: 12,
            d_i: 16,
            n: 20,
            r_d: 3,
            r_v: 4,
            noise_scale: 0.1,
        }
    }
}

/// Run `instances` seeded random instances of one check. Instance `i`
/// uses seed `derive_seed(seed, [check, i])`; the first Weyl instance uses
/// `E = 0`.
pub fn verify(kind: CheckKind, instances: usize, seed: u64, cfg: &VerifyConfig) -> Result<BoundCheckReport> {
    let parts: Vec<BoundCheckReport> = (0..instances)
        .into_par_iter()
        .map(|i| {
            let s = derive_seed(seed, &[kind.as_str(), &i.to_string()]);
            run_one(kind, i, s, cfg)
        })
        .collect::<Result<_>>()?;
    let config = serde_json::json!({
        "check": kind.as_str(), "instances": instances, "seed": seed, "dims": cfg
    });
    Ok(BoundCheckReport::combine(kind.as_str(), parts, config))
}

fn run_one(kind: CheckKind, index: usize, s: u64, cfg: &VerifyConfig) -> Result<BoundCheckReport> {
    let mut rng = stream(s, &["instance"]);
    match kind {
        CheckKind::Theorem1 => {
            let noise = cfg.noise_scale * rng.random_range(0.0..=1.0);
            check_theorem1(cfg.d_o, cfg.d_i, cfg.n, cfg.r_d, noise, s)
        }
        CheckKind::Corollary1 => {
            let noise = cfg.noise_scale * rng.random_range(0.0..=1.0);
            check_corollary1_with_noise(cfg.d_o, cfg.d_i, cfg.n, cfg.r_d, cfg.r_v, noise, s)
        }
        CheckKind::Weyl => {
            let a = low_rank_ish(&mut rng, cfg.d_o, cfg.d_i);
            let e = if index == 0 {
                DenseMatrix::zeros(cfg.d_o, cfg.d_i)
            } else {
                let scale = rng.random_range(1e-3..1.0);
                gaussian_matrix(&mut rng, cfg.d_o, cfg.d_i, scale)
            };
            check_weyl(&a, &e, s)
        }
        CheckKind::Wedin => {
            let m = low_rank_ish(&mut rng, cfg.d_o, cfg.d_i);
            let scale = rng.random_range(1e-3..0.3);
            let h = gaussian_matrix(&mut rng, cfg.d_o, cfg.d_i, scale);
            let k = cfg.d_o.min(cfg.d_i);
            let r = rng.random_range(1..=cfg.r_d.clamp(1, k));
            check_wedin(&m, &h, r, s)
        }
        CheckKind::Surrogate => {
            let mut local = cfg.clone();
            local.noise_scale = cfg.noise_scale * rng.random_range(0.0..=1.0);
            match surrogate_instance(&local, s)? {
                Some(inst) => check_surrogate_bounds(&inst, s),
                None => Ok(BoundCheckReport::skipped_instance("surrogate", serde_json::Value::Null)),
            }
        }
    }
}

/// Gaussian matrix with a decaying spectrum so gaps are uneven.
fn low_rank_ish(rng: &mut StreamRng, rows: usize, cols: usize) -> DenseMatrix {
    let k = rows.min(cols);
    let mut out = DenseMatrix::zeros(rows, cols);
    for j in 0..k {
        let weight = 0.7f64.powi(j as i32) * rng.random_range(0.5..1.5);
        let u = gaussian_matrix(rng, rows, 1, 1.0);
        let v = gaussian_matrix(rng, 1, cols, 1.0);
        out.axpy(weight, &u.matmul(&v));
    }
    out
}
