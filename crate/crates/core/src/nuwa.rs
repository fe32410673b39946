//! Null-space filtering, projection-aware low-rank adaptation and layer-wise
//! fusion.
//!
//! Per selected layer and task step `t ≥ 2`:
//!
//! 1. the previous cumulative update `τ̃` yields a basis `V̂_prev` of its top
//!    right singular vectors and the filter `P = I − V̂_prev·V̂_prevᵀ`;
//! 2. a low-rank pair `(B, A)` is fitted so that the fused update keeps the
//!    old behaviour on `V̂_prev` and reproduces `τ_t` on its own top
//!    directions `V̂_t`;
//! 3. the layer becomes `W_prev + τ_t·(P + B·A)`.

use std::str::FromStr;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{complement_projector, top_right_singular_vectors, DenseMatrix, OrthonormalBasis};
use crate::rng::{derive_seed, gaussian_matrix, stream};
use crate::state::MergeState;
use crate::TaskVector;

/// Which parts of the method run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Filter only, no adapter.
    NullSpaceOnly,
    /// Adapter only; the filter is replaced by the identity.
    LoraOnly,
    /// `W_prev + τ_t`.
    Naive,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NullSpaceOnly,
        Ablation::LoraOnly,
        Ablation::Naive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NullSpaceOnly => "null_space_only",
            Ablation::LoraOnly => "lora_only",
            Ablation::Naive => "naive",
        }
    }

    fn filters(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NullSpaceOnly)
    }

    fn adapts(self) -> bool {
        matches!(self, Ablation::Full | Ablation::LoraOnly)
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "full" => Ok(Ablation::Full),
            "null_space_only" | "null_only" => Ok(Ablation::NullSpaceOnly),
            "lora_only" => Ok(Ablation::LoraOnly),
            "naive" => Ok(Ablation::Naive),
            _ => Err(Error::InvalidConfig(format!("unknown ablation mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuwaConfig {
    /// Rank of the filter basis.
    pub r_p: usize,
    /// Adapter rank.
    pub r_l: usize,
    /// Rank of the new task's fidelity directions.
    pub r_v: usize,
    pub lr: f64,
    pub max_iter: usize,
    pub sigma_init: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for NuwaConfig {
    fn default() -> Self {
        Self {
            r_p: 128,
            r_l: 64,
            r_v: 8,
            lr: 1e-3,
            max_iter: 50,
            sigma_init: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ablation: Ablation::Full,
            seed: 0,
        }
    }
}

impl NuwaConfig {
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive and finite");
        }
        if !(self.sigma_init >= 0.0 && self.sigma_init.is_finite()) {
            return bad("sigma_init must be non-negative and finite");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("optimizer betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad("eps must be positive and finite");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Filter `P = I − V·Vᵀ` over a basis of previously used input directions.
/// The dense projector is only built on request; [`apply`](Self::apply)
/// works from the basis directly.
#[derive(Clone, Debug)]
pub struct NullSpaceFilter {
    basis: OrthonormalBasis,
    projector: OnceLock<DenseMatrix>,
}

impl NullSpaceFilter {
    pub fn new(basis: OrthonormalBasis) -> Self {
        Self {
            basis,
            projector: OnceLock::new(),
        }
    }

    /// The identity filter on `R^dim`.
    pub fn identity(dim: usize) -> Self {
        Self::new(OrthonormalBasis::empty(dim))
    }

    pub fn basis(&self) -> &OrthonormalBasis {
        &self.basis
    }

    pub fn rank(&self) -> usize {
        self.basis.rank()
    }

    pub fn projector(&self) -> &DenseMatrix {
        self.projector.get_or_init(|| complement_projector(&self.basis))
    }

    /// `m · P`.
    pub fn apply(&self, m: &DenseMatrix) -> DenseMatrix {
        self.basis.remove_from_rows(m)
    }
}

pub fn build_filter(tau_cum: &DenseMatrix, r_p: usize) -> Result<NullSpaceFilter> {
    Ok(NullSpaceFilter::new(top_right_singular_vectors(tau_cum, r_p)?))
}

/// Low-rank correction `B·A` acting on the input side of the task vector:
/// `A` is `r_l × d_i`, `B` is `d_i × r_l`, so `τ_t·B·A` has the layer's shape.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.a.cols()
    }

    /// `B·A`.
    pub fn product(&self) -> DenseMatrix {
        self.b.matmul(&self.a)
    }
}

/// `A = 0`, `B ~ N(0, σ²)` drawn from a stream seeded by `seed`.
pub fn init_adapter(d_i: usize, r_l: usize, sigma_init: f64, seed: u64) -> Result<LoraAdapter> {
    if r_l == 0 {
        return Err(Error::InvalidInput("adapter rank must be at least 1".into()));
    }
    let mut rng = stream(seed, &["adapter-b"]);
    Ok(LoraAdapter {
        a: DenseMatrix::zeros(r_l, d_i),
        b: gaussian_matrix(&mut rng, d_i, r_l, sigma_init),
    })
}

/// Operands of the data-free objective `L = ‖T − (M + τ_t·B·A)·V̂‖_F²`.
#[derive(Clone, Debug)]
pub struct ObjectiveOperands {
    t: DenseMatrix,
    v_hat: DenseMatrix,
    m: DenseMatrix,
    tau_t: DenseMatrix,
    prev_rank: usize,
    // T − M·V̂, the residual at B·A = 0.
    base_residual: DenseMatrix,
}

impl ObjectiveOperands {
    /// Targets `[τ̃·V̂_prev | τ_t·V̂_t]`.
    pub fn targets(&self) -> &DenseMatrix {
        &self.t
    }

    /// `[V̂_prev | V̂_t]`.
    pub fn v_hat(&self) -> &DenseMatrix {
        &self.v_hat
    }

    /// `τ̃ + τ_t·P`.
    pub fn m(&self) -> &DenseMatrix {
        &self.m
    }

    pub fn tau_t(&self) -> &DenseMatrix {
        &self.tau_t
    }

    /// Number of leading columns of `V̂` that come from the filter basis.
    pub fn prev_rank(&self) -> usize {
        self.prev_rank
    }

    pub fn task_rank(&self) -> usize {
        self.v_hat.cols() - self.prev_rank
    }

    fn residual(&self, adapter: &LoraAdapter) -> DenseMatrix {
        let tb = self.tau_t.matmul(&adapter.b);
        let av = adapter.a.matmul(&self.v_hat);
        let mut r = self.base_residual.clone();
        r.axpy(-1.0, &tb.matmul(&av));
        r
    }
}

/// Build the objective operands with the filter applied in `M`.
pub fn assemble_operands(
    tau_cum: &DenseMatrix,
    tau_t: &DenseMatrix,
    filter: &NullSpaceFilter,
    r_v: usize,
) -> Result<ObjectiveOperands> {
    assemble(tau_cum, tau_t, filter.basis(), true, r_v)
}

fn assemble(
    tau_cum: &DenseMatrix,
    tau_t: &DenseMatrix,
    prev: &OrthonormalBasis,
    filtered: bool,
    r_v: usize,
) -> Result<ObjectiveOperands> {
    if tau_cum.shape() != tau_t.shape() {
        return Err(Error::InvalidInput(format!(
            "cumulative update {:?} and task vector {:?} differ in shape",
            tau_cum.shape(),
            tau_t.shape()
        )));
    }
    if prev.dim() != tau_t.cols() {
        return Err(Error::InvalidInput(format!(
            "filter basis lives in R^{} but the layer has {} inputs",
            prev.dim(),
            tau_t.cols()
        )));
    }
    let task = top_right_singular_vectors(tau_t, r_v)?;
    let t = tau_cum.matmul(prev.columns()).hcat(&tau_t.matmul(task.columns()));
    let v_hat = prev.hcat(&task);
    let mut m = tau_cum.clone();
    if filtered {
        m.axpy(1.0, &prev.remove_from_rows(tau_t));
    } else {
        m.axpy(1.0, tau_t);
    }
    let base_residual = t.sub(&m.matmul(&v_hat));
    Ok(ObjectiveOperands {
        t,
        v_hat,
        m,
        tau_t: tau_t.clone(),
        prev_rank: prev.rank(),
        base_residual,
    })
}

pub fn objective(adapter: &LoraAdapter, ops: &ObjectiveOperands) -> Result<f64> {
    let loss = ops.residual(adapter).frobenius_norm_sq();
    if !loss.is_finite() {
        return Err(Error::numerical("objective", format!("non-finite loss {loss}")));
    }
    Ok(loss)
}

/// Gradients of the objective with respect to `A` and `B`.
pub fn objective_gradient(adapter: &LoraAdapter, ops: &ObjectiveOperands) -> (DenseMatrix, DenseMatrix) {
    let r = ops.residual(adapter);
    gradient_from_residual(adapter, ops, &r)
}

fn gradient_from_residual(
    adapter: &LoraAdapter,
    ops: &ObjectiveOperands,
    r: &DenseMatrix,
) -> (DenseMatrix, DenseMatrix) {
    // gradA = −2·(τ_t·B)ᵀ·R·V̂ᵀ
    let tb = ops.tau_t.matmul(&adapter.b);
    let grad_a = tb.t_matmul(r).matmul_t(&ops.v_hat).scale(-2.0);
    // gradB = −2·τ_tᵀ·(R·(A·V̂)ᵀ)
    let av = adapter.a.matmul(&ops.v_hat);
    let grad_b = ops.tau_t.t_matmul(&r.matmul_t(&av)).scale(-2.0);
    (grad_a, grad_b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        NuwaConfig::default().adam()
    }
}

/// One bias-corrected Adam update; `step` counts from 1.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    moment1: &mut [f64],
    moment2: &mut [f64],
    step: u32,
    hp: &AdamParams,
) {
    assert!(step >= 1, "adam step counts from 1");
    assert!(param.len() == grad.len() && grad.len() == moment1.len() && moment1.len() == moment2.len());
    let c1 = 1.0 - hp.beta1.powi(step as i32);
    let c2 = 1.0 - hp.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        moment1[i] = hp.beta1 * moment1[i] + (1.0 - hp.beta1) * g;
        moment2[i] = hp.beta2 * moment2[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = moment1[i] / c1;
        let v_hat = moment2[i] / c2;
        param[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

/// Result of [`adapt`].
#[derive(Clone, Debug)]
pub struct Adaptation {
    /// Lowest-loss iterate seen.
    pub adapter: LoraAdapter,
    /// Loss of every iterate, the initial one first.
    pub trace: Vec<f64>,
    pub best_iteration: usize,
}

impl Adaptation {
    pub fn initial_loss(&self) -> f64 {
        self.trace[0]
    }

    pub fn best_loss(&self) -> f64 {
        self.trace[self.best_iteration]
    }
}

/// Run `max_iter` Adam steps on `(A, B)` and keep the best iterate.
pub fn adapt(adapter: LoraAdapter, ops: &ObjectiveOperands, max_iter: usize, hp: &AdamParams) -> Result<Adaptation> {
    let mut current = adapter;
    let mut best = current.clone();
    let mut best_iteration = 0;
    let mut trace = Vec::with_capacity(max_iter + 1);
    let (mut m_a, mut v_a) = (
        vec![0.0; current.a.as_slice().len()],
        vec![0.0; current.a.as_slice().len()],
    );
    let (mut m_b, mut v_b) = (
        vec![0.0; current.b.as_slice().len()],
        vec![0.0; current.b.as_slice().len()],
    );

    for it in 0..=max_iter {
        let r = ops.residual(&current);
        let loss = r.frobenius_norm_sq();
        if !loss.is_finite() {
            return Err(Error::numerical(
                format!("adapter iteration {it}"),
                format!("non-finite loss {loss}"),
            ));
        }
        trace.push(loss);
        if loss < trace[best_iteration] {
            best = current.clone();
            best_iteration = it;
        }
        if it == max_iter {
            break;
        }
        let (grad_a, grad_b) = gradient_from_residual(&current, ops, &r);
        let step = (it + 1) as u32;
        adam_step(
            current.a.as_mut_slice(),
            grad_a.as_slice(),
            &mut m_a,
            &mut v_a,
            step,
            hp,
        );
        adam_step(
            current.b.as_mut_slice(),
            grad_b.as_slice(),
            &mut m_b,
            &mut v_b,
            step,
            hp,
        );
    }
    Ok(Adaptation {
        adapter: best,
        trace,
        best_iteration,
    })
}

/// `τ_t·(P + B·A)`; a missing filter means `P = I`, a missing adapter `B·A = 0`.
pub fn fused_update(
    tau_t: &DenseMatrix,
    filter: Option<&NullSpaceFilter>,
    adapter: Option<&LoraAdapter>,
) -> DenseMatrix {
    let mut out = match filter {
        Some(f) => f.apply(tau_t),
        None => tau_t.clone(),
    };
    if let Some(ad) = adapter {
        out.axpy(1.0, &tau_t.matmul(&ad.b).matmul(&ad.a));
    }
    out
}

/// `W_prev + τ_t·(P + B·A)`.
pub fn fuse(
    merged_prev: &DenseMatrix,
    tau_t: &DenseMatrix,
    filter: Option<&NullSpaceFilter>,
    adapter: Option<&LoraAdapter>,
) -> DenseMatrix {
    merged_prev.add(&fused_update(tau_t, filter, adapter))
}

/// Per-layer record of one step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerLog {
    pub layer: String,
    pub filter_rank: usize,
    pub task_rank: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub best_iteration: Option<usize>,
}

/// Update of one layer for one step. `task` labels the RNG stream.
pub fn nuwa_layer(
    name: &str,
    tau_cum: &DenseMatrix,
    tau_t: &DenseMatrix,
    config: &NuwaConfig,
    task: usize,
) -> Result<(DenseMatrix, LayerLog)> {
    let mut log = LayerLog {
        layer: name.to_string(),
        filter_rank: 0,
        task_rank: 0,
        initial_loss: None,
        final_loss: None,
        best_iteration: None,
    };
    let mode = config.ablation;
    let needs_basis = mode.filters() || mode.adapts();
    let prev = if needs_basis {
        top_right_singular_vectors(tau_cum, config.r_p)?
    } else {
        OrthonormalBasis::empty(tau_t.cols())
    };
    log.filter_rank = if mode.filters() { prev.rank() } else { 0 };
    let filter = mode.filters().then(|| NullSpaceFilter::new(prev.clone()));

    let adapter = if mode.adapts() && config.r_l > 0 {
        let seed = derive_seed(config.seed, &["lora", &task.to_string(), name]);
        let init = init_adapter(tau_t.cols(), config.r_l, config.sigma_init, seed)?;
        let ops = assemble(tau_cum, tau_t, &prev, mode.filters(), config.r_v)?;
        log.task_rank = ops.task_rank();
        let fit = adapt(init, &ops, config.max_iter, &config.adam())?;
        log.initial_loss = Some(fit.initial_loss());
        log.final_loss = Some(fit.best_loss());
        log.best_iteration = Some(fit.best_iteration);
        Some(fit.adapter)
    } else {
        None
    };
    let update = fused_update(tau_t, filter.as_ref(), adapter.as_ref());
    if !update.is_finite() {
        return Err(Error::numerical(format!("layer {name:?}"), "non-finite fused update"));
    }
    let mut next = tau_cum.clone();
    next.axpy(1.0, &update);
    Ok((next, log))
}

/// One step for `t ≥ 2`. `task` is the task's label for seeding and error
/// context (its position in the input sequence).
pub fn nuwa_step(
    state: &MergeState,
    tau_t: &TaskVector,
    config: &NuwaConfig,
    task: usize,
) -> Result<(MergeState, Vec<LayerLog>)> {
    if state.step_index() == 0 {
        return Err(Error::InvalidInput(
            "nuwa_step needs an initialized state (step_index ≥ 1)".into(),
        ));
    }
    config.validate()?;
    state.cumulative().ensure_compatible(tau_t)?;
    let names: Vec<&String> = state.cumulative().layers.keys().collect();
    let results: Vec<(String, DenseMatrix, LayerLog)> = names
        .par_iter()
        .map(|&name| {
            let (next, log) = nuwa_layer(
                name,
                &state.cumulative().layers[name],
                &tau_t.layers[name],
                config,
                task,
            )
            .map_err(|e| e.context(format!("task {task}, layer {name:?}")))?;
            Ok((name.clone(), next, log))
        })
        .collect::<Result<_>>()?;
    let mut cumulative = indexmap::IndexMap::with_capacity(results.len());
    let mut logs = Vec::with_capacity(results.len());
    for (name, next, log) in results {
        cumulative.insert(name, next);
        logs.push(log);
    }
    Ok((state.advance(cumulative)?, logs))
}
