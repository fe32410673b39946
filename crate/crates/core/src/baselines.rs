//! Data-free baseline merge rules, each written as one sequential step over
//! [`MergeState`].

use indexmap::IndexMap;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, TaskVector, Tensor};
use crate::error::{Error, Result};
use crate::linalg::{top_right_singular_vectors, DenseMatrix};
use crate::state::{MergeState, MethodScratch};

/// Weight averaging: `θ_t = ((t−1)·θ_{t−1} + θ_t) / t` on every tensor.
pub fn wa_step(state: &MergeState, theta_t: &Checkpoint) -> Result<MergeState> {
    state.ensure_compatible(theta_t)?;
    let t = (state.step_index() + 1) as f64;
    let tau = state.task_vector(theta_t)?;
    let cumulative = state
        .cumulative()
        .zip_map(&tau, |prev, new| prev.zip_with(new, |p, n| ((t - 1.0) * p + n) / t))?
        .layers;
    let mut next = state.advance(cumulative)?;

    let selected: Vec<String> = state.layer_names().map(str::to_string).collect();
    let mut averaged = Vec::new();
    for (name, cur) in state.passthrough().tensors() {
        if selected.iter().any(|s| s == name) {
            continue;
        }
        let new = theta_t.get(name).expect("checked compatible");
        let data = cur
            .data()
            .iter()
            .zip(new.data())
            .map(|(&p, &n)| (((t - 1.0) * f64::from(p) + f64::from(n)) / t) as f32)
            .collect();
        averaged.push((name.to_string(), Tensor::new(cur.shape().to_vec(), data)?));
    }
    for (name, tensor) in averaged {
        next.passthrough_mut().replace_tensor(&name, tensor);
    }
    Ok(next)
}

/// Task arithmetic: `θ_t = θ_{t−1} + λ·τ_t` on the selected layers.
pub fn ta_step(state: &MergeState, tau_t: &TaskVector, lambda: f64) -> Result<MergeState> {
    if !lambda.is_finite() {
        return Err(Error::InvalidInput(format!("lambda must be finite, got {lambda}")));
    }
    let cumulative = state
        .cumulative()
        .zip_map(tau_t, |prev, tau| {
            let mut out = prev.clone();
            out.axpy(lambda, tau);
            out
        })?
        .layers;
    state.advance(cumulative)
}

/// Indices of the `k%` largest-magnitude entries (lower index wins ties).
fn top_k_mask(values: &[f64], top_k_percent: f64) -> Vec<bool> {
    let n = values.len();
    let keep = ((top_k_percent / 100.0) * n as f64).ceil() as usize;
    let keep = keep.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    let mut mask = vec![false; n];
    for &i in &order[..keep] {
        mask[i] = true;
    }
    mask
}

/// Keep the top `k%` entries by magnitude, zero the rest.
pub fn trim_top_k(m: &DenseMatrix, top_k_percent: f64) -> DenseMatrix {
    let mask = top_k_mask(m.as_slice(), top_k_percent);
    let data = m
        .as_slice()
        .iter()
        .zip(&mask)
        .map(|(&v, &keep)| if keep { v } else { 0.0 })
        .collect();
    DenseMatrix::from_vec(m.rows(), m.cols(), data).expect("finite input")
}

fn ties_layer(a: &DenseMatrix, b: &DenseMatrix, top_k_percent: f64) -> DenseMatrix {
    let ta = trim_top_k(a, top_k_percent);
    let tb = trim_top_k(b, top_k_percent);
    ta.zip_with(&tb, |x, y| {
        let elected = (x + y).signum();
        if x + y == 0.0 {
            return 0.0;
        }
        let (mut sum, mut count) = (0.0, 0u32);
        for v in [x, y] {
            if v != 0.0 && v.signum() == elected {
                sum += v;
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / f64::from(count)
        }
    })
}

/// TIES combination: trim both operands to their top-k% magnitudes, elect a
/// sign per coordinate from the trimmed sum, average the agreeing entries.
pub fn ties_combine(tau_acc: &TaskVector, tau_t: &TaskVector, top_k_percent: f64) -> Result<TaskVector> {
    if !(top_k_percent > 0.0 && top_k_percent <= 100.0) {
        return Err(Error::InvalidInput(format!(
            "top_k_percent must be in (0, 100], got {top_k_percent}"
        )));
    }
    tau_acc.zip_map(tau_t, |a, b| ties_layer(a, b, top_k_percent))
}

/// Elementwise larger magnitude; ties keep the accumulator entry.
pub fn magmax_combine(tau_acc: &TaskVector, tau_t: &TaskVector) -> Result<TaskVector> {
    tau_acc.zip_map(tau_t, |a, b| {
        a.zip_with(b, |x, y| if y.abs() > x.abs() { y } else { x })
    })
}

/// How the TIES / MagMax accumulator is folded back into the weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AccumulatorUpdate {
    /// `θ_t = θ_0 + λ·τ_acc`
    #[default]
    FromBase,
    /// `θ_t = θ_{t−1} + λ·τ_acc`, compounding every step.
    LiteralRecursive,
}

fn accumulator_step(
    state: &MergeState,
    tau_t: &TaskVector,
    lambda: f64,
    mode: AccumulatorUpdate,
    combine: impl Fn(&TaskVector, &TaskVector) -> Result<TaskVector>,
) -> Result<MergeState> {
    let acc = match &state.scratch {
        MethodScratch::Accumulator(prev) => combine(prev, tau_t)?,
        MethodScratch::None => {
            state.cumulative().ensure_compatible(tau_t)?;
            tau_t.clone()
        }
    };
    let cumulative: IndexMap<String, DenseMatrix> = acc
        .layers
        .iter()
        .map(|(k, a)| {
            let mut out = match mode {
                AccumulatorUpdate::FromBase => DenseMatrix::zeros(a.rows(), a.cols()),
                AccumulatorUpdate::LiteralRecursive => state.cumulative().layers[k].clone(),
            };
            out.axpy(lambda, a);
            (k.clone(), out)
        })
        .collect();
    let mut next = state.advance(cumulative)?;
    next.scratch = MethodScratch::Accumulator(acc);
    Ok(next)
}

pub fn ties_step(
    state: &MergeState,
    tau_t: &TaskVector,
    lambda: f64,
    top_k_percent: f64,
    mode: AccumulatorUpdate,
) -> Result<MergeState> {
    accumulator_step(state, tau_t, lambda, mode, |a, b| ties_combine(a, b, top_k_percent))
}

pub fn magmax_step(state: &MergeState, tau_t: &TaskVector, lambda: f64, mode: AccumulatorUpdate) -> Result<MergeState> {
    accumulator_step(state, tau_t, lambda, mode, magmax_combine)
}

/// OPCM scaling schedule `λ_t = √t / α`.
pub fn opcm_lambda(t: usize, alpha: f64) -> f64 {
    (t as f64).sqrt() / alpha
}

/// One OPCM layer update. Returns the new cumulative update and the
/// projected task vector.
pub fn opcm_layer(
    tau_cum: &DenseMatrix,
    tau_t: &DenseMatrix,
    t: usize,
    alpha: f64,
    r_proj: usize,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let basis = top_right_singular_vectors(tau_cum, r_proj)?;
    let projected = basis.remove_from_rows(tau_t);
    let lam_prev = opcm_lambda(t - 1, alpha);
    let lam = opcm_lambda(t, alpha);
    let mut next = tau_cum.scale(lam_prev);
    next.axpy(1.0, &projected);
    Ok((next.scale(1.0 / lam), projected))
}

/// Orthogonal-projection continual merging step (requires `step_index ≥ 1`).
pub fn opcm_step(state: &MergeState, tau_t: &TaskVector, alpha: f64, r_proj: usize) -> Result<MergeState> {
    if state.step_index() == 0 {
        return Err(Error::InvalidInput(
            "opcm_step needs an initialized state (step_index ≥ 1)".into(),
        ));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidInput(format!("alpha must be positive, got {alpha}")));
    }
    state.cumulative().ensure_compatible(tau_t)?;
    let t = state.step_index() + 1;
    let names: Vec<&String> = state.cumulative().layers.keys().collect();
    let updated: Vec<(String, DenseMatrix)> = names
        .par_iter()
        .map(|&name| {
            let (next, _) = opcm_layer(&state.cumulative().layers[name], &tau_t.layers[name], t, alpha, r_proj)
                .map_err(|e| e.context(format!("layer {name:?}")))?;
            Ok((name.clone(), next))
        })
        .collect::<Result<_>>()?;
    state.advance(updated.into_iter().collect())
}

fn wudi_loss_grad(tau_m: &DenseMatrix, ops: &[(&DenseMatrix, DenseMatrix, f64)]) -> (f64, DenseMatrix) {
    let mut loss = 0.0;
    let mut grad = DenseMatrix::zeros(tau_m.rows(), tau_m.cols());
    for (tau, gram, inv_norm) in ops {
        // (τ_m − τ_i)·τ_iᵀ and its contribution 2·(τ_m − τ_i)·τ_iᵀτ_i / ‖τ_i‖²
        let diff = tau_m.sub(tau);
        loss += inv_norm * diff.matmul_t(tau).frobenius_norm_sq();
        grad.axpy(2.0 * inv_norm, &diff.matmul(gram));
    }
    (loss, grad)
}

/// WUDI objective `Σ_i ‖(τ_m − τ_i)·τ_iᵀ‖_F² / ‖τ_i‖_F²` for one layer.
/// Operands with zero norm contribute nothing.
pub fn wudi_loss(tau_m: &DenseMatrix, operands: &[&DenseMatrix]) -> f64 {
    operands
        .iter()
        .filter(|t| t.frobenius_norm_sq() > 0.0)
        .map(|t| tau_m.sub(t).matmul_t(t).frobenius_norm_sq() / t.frobenius_norm_sq())
        .sum()
}

/// Plain gradient descent on the WUDI objective from the operand mean.
/// Returns the final iterate and the loss trace (initial loss first).
pub fn wudi_layer(operands: &[&DenseMatrix], lr: f64, iters: usize) -> Result<(DenseMatrix, Vec<f64>)> {
    let first = operands
        .first()
        .ok_or_else(|| Error::InvalidInput("wudi needs at least one operand".into()))?;
    let mut tau_m = DenseMatrix::zeros(first.rows(), first.cols());
    for t in operands {
        if t.shape() != first.shape() {
            return Err(Error::IncompatibleCheckpoints(format!(
                "wudi operand shape {:?} vs {:?}",
                t.shape(),
                first.shape()
            )));
        }
        tau_m.axpy(1.0 / operands.len() as f64, t);
    }
    let ops: Vec<(&DenseMatrix, DenseMatrix, f64)> = operands
        .iter()
        .filter_map(|t| {
            let n = t.frobenius_norm_sq();
            (n > 0.0).then(|| (*t, t.t_matmul(t), 1.0 / n))
        })
        .collect();

    let mut trace = Vec::with_capacity(iters + 1);
    for it in 0..=iters {
        let (loss, grad) = wudi_loss_grad(&tau_m, &ops);
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::Divergence { iteration: it, loss });
        }
        trace.push(loss);
        if it == iters {
            break;
        }
        tau_m.axpy(-lr, &grad);
    }
    Ok((tau_m, trace))
}

/// WUDI merge over whole task vectors.
pub fn wudi_merge(tau_list: &[&TaskVector], lr: f64, iters: usize) -> Result<TaskVector> {
    let first = tau_list
        .first()
        .ok_or_else(|| Error::InvalidInput("wudi needs at least one task vector".into()))?;
    for tv in &tau_list[1..] {
        first.ensure_compatible(tv)?;
    }
    let names: Vec<&String> = first.layers.keys().collect();
    let layers: Vec<(String, DenseMatrix)> = names
        .par_iter()
        .map(|&name| {
            let ops: Vec<&DenseMatrix> = tau_list.iter().map(|tv| &tv.layers[name]).collect();
            let (m, _) = wudi_layer(&ops, lr, iters).map_err(|e| e.context(format!("layer {name:?}")))?;
            Ok((name.clone(), m))
        })
        .collect::<Result<_>>()?;
    Ok(TaskVector {
        layers: layers.into_iter().collect(),
        base_id: first.base_id.clone(),
    })
}

/// Continual WUDI: merge `[τ̃_{≤t−1}, τ_t]` and restart from `θ_0`.
pub fn wudi_step(state: &MergeState, tau_t: &TaskVector, lr: f64, iters: usize) -> Result<MergeState> {
    let merged = wudi_merge(&[state.cumulative(), tau_t], lr, iters)?;
    state.advance(merged.layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::LayerSelector;

    fn tv(values: &[f64]) -> TaskVector {
        let mut t = TaskVector::new("b");
        t.layers.insert(
            "w".into(),
            DenseMatrix::from_vec(1, values.len(), values.to_vec()).unwrap(),
        );
        t
    }

    fn one_layer(v: f32) -> Checkpoint {
        Checkpoint::new()
            .with_tensor("w", Tensor::new(vec![1, 1], vec![v]).unwrap())
            .unwrap()
    }

    #[test]
    fn wa_examples() {
        let sel = LayerSelector::default();
        let s0 = MergeState::new(one_layer(0.0), &sel).unwrap();
        let s1 = wa_step(&s0, &one_layer(2.0)).unwrap();
        assert_eq!(s1.merged_layer("w").unwrap().as_slice(), &[2.0]);
        let s2 = wa_step(&s1, &one_layer(4.0)).unwrap();
        assert_eq!(s2.merged_layer("w").unwrap().as_slice(), &[3.0]);
    }

    #[test]
    fn ta_examples() {
        let sel = LayerSelector::default();
        let s0 = MergeState::new(one_layer(1.0), &sel).unwrap();
        let same = ta_step(&s0, &tv(&[2.0]), 0.0).unwrap();
        assert_eq!(same.merged_layer("w").unwrap().as_slice(), &[1.0]);
        let s1 = ta_step(&s0, &tv(&[2.0]), 0.3).unwrap();
        assert!((s1.merged_layer("w").unwrap()[(0, 0)] - 1.6).abs() < 1e-15);
        assert!(ta_step(&s0, &tv(&[2.0]), f64::NAN).is_err());
    }

    #[test]
    fn ties_hand_example() {
        let out = ties_combine(&tv(&[1.0, 0.0, -2.0]), &tv(&[-1.0, 0.0, 4.0]), 100.0).unwrap();
        assert_eq!(out.layers["w"].as_slice(), &[0.0, 0.0, 4.0]);
        let a = tv(&[0.5, -3.0, 2.0, 0.0]);
        assert_eq!(ties_combine(&a, &a, 100.0).unwrap(), a);
        assert!(ties_combine(&a, &a, 0.0).is_err());
    }

    #[test]
    fn trim_keeps_ceiling_of_fraction() {
        let m = DenseMatrix::from_vec(1, 5, vec![0.1, -5.0, 3.0, 0.2, -0.3]).unwrap();
        // 20% of 5 = 1 entry
        assert_eq!(trim_top_k(&m, 20.0).as_slice(), &[0.0, -5.0, 0.0, 0.0, 0.0]);
        // 50% of 5 rounds up to 3
        assert_eq!(trim_top_k(&m, 50.0).as_slice(), &[0.0, -5.0, 3.0, 0.0, -0.3]);
    }

    #[test]
    fn magmax_examples() {
        let out = magmax_combine(&tv(&[2.0, -1.0]), &tv(&[-3.0, 0.5])).unwrap();
        assert_eq!(out.layers["w"].as_slice(), &[-3.0, -1.0]);
        // tie keeps the accumulator
        let out = magmax_combine(&tv(&[2.0]), &tv(&[-2.0])).unwrap();
        assert_eq!(out.layers["w"].as_slice(), &[2.0]);
    }

    #[test]
    fn opcm_full_overlap_and_empty_basis() {
        let tau_cum = DenseMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let inside = DenseMatrix::from_vec(2, 2, vec![0.0, 0.0, 3.0, 0.0]).unwrap();
        let (next, projected) = opcm_layer(&tau_cum, &inside, 2, 0.5, 4).unwrap();
        assert!(projected.frobenius_norm() < 1e-15);
        let ratio = opcm_lambda(1, 0.5) / opcm_lambda(2, 0.5);
        assert!(next.sub(&tau_cum.scale(ratio)).frobenius_norm() < 1e-15);

        let zero = DenseMatrix::zeros(2, 2);
        let (_, projected) = opcm_layer(&zero, &inside, 2, 0.5, 4).unwrap();
        assert_eq!(projected, inside);
    }

    #[test]
    fn wudi_single_and_duplicate_operands() {
        let t = DenseMatrix::from_vec(2, 3, vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0]).unwrap();
        let (m, trace) = wudi_layer(&[&t], 1e-3, 10).unwrap();
        assert_eq!(m, t);
        assert_eq!(trace[0], 0.0);
        let (m, trace) = wudi_layer(&[&t, &t], 1e-3, 10).unwrap();
        assert_eq!(m, t);
        assert!(trace.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn wudi_divergence_is_reported() {
        let a = DenseMatrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let b = DenseMatrix::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        let err = wudi_layer(&[&a, &b], 1e6, 200).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }
}
