//! Accuracy bookkeeping and the multi-order benchmark protocol.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::{chain, chain_from_layers, chain_weights, task_order, Suite, SyntheticTask};
use crate::analysis::csv_err;
use crate::checkpoint::{Checkpoint, LayerSelector};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::merge::{MethodId, MethodParams, SequentialMerger};

/// Fraction of the task's samples whose argmax readout matches the label.
pub fn task_accuracy(task: &SyntheticTask, layers: &[DenseMatrix]) -> Result<f64> {
    let w = chain(layers);
    if w.cols() != task.h.cols() || w.rows() != task.head.cols() {
        return Err(Error::InvalidInput(format!(
            "chain maps {} → {}, task needs {} → {}",
            w.cols(),
            w.rows(),
            task.h.cols(),
            task.head.cols()
        )));
    }
    let logits = task.h.matmul_t(&w).matmul_t(&task.head);
    let mut correct = 0usize;
    for (n, &y) in task.labels.iter().enumerate() {
        let row = logits.row(n);
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        correct += usize::from(best == y);
    }
    Ok(correct as f64 / task.labels.len() as f64)
}

/// Per-task accuracy of a merged checkpoint and their unweighted mean.
pub fn evaluate_acc(merged: &Checkpoint, tasks: &[SyntheticTask], depth: usize) -> Result<(Vec<f64>, f64)> {
    let layers = chain_weights(merged, depth)?;
    let accs: Vec<f64> = tasks.iter().map(|t| task_accuracy(t, &layers)).collect::<Result<_>>()?;
    let mean = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
    Ok((accs, mean))
}

/// Backward transfer from a lower-triangular history: `history[s][i]` is
/// the accuracy on the `i`-th merged task after step `s` (`i ≤ s`).
pub fn evaluate_bwt(history: &[Vec<f64>]) -> Result<f64> {
    let t = history.len();
    if t < 2 {
        return Err(Error::Undefined("backward transfer needs at least two tasks".into()));
    }
    for (s, row) in history.iter().enumerate() {
        if row.len() < s + 1 {
            return Err(Error::InvalidInput(format!(
                "history row {s} has {} entries, needs {}",
                row.len(),
                s + 1
            )));
        }
    }
    let last = &history[t - 1];
    let sum: f64 = (0..t - 1).map(|i| last[i] - history[i][i]).sum();
    Ok(sum / (t - 1) as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchResult {
    pub method: MethodId,
    pub order_seed: u64,
    /// Task ids in merge order.
    pub order: Vec<usize>,
    /// `accuracy[s][i]`: accuracy on the `i`-th task of the order after
    /// step `s`.
    pub accuracy: Vec<Vec<f64>>,
    pub acc: f64,
    /// `None` for single-task suites.
    pub bwt: Option<f64>,
    pub wall_time_ms: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MethodSummary {
    pub method: MethodId,
    pub orders: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub bwt_mean: Option<f64>,
    pub bwt_std: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProtocolResult {
    pub summary: MethodSummary,
    pub results: Vec<BenchResult>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_order(
    method: MethodId,
    suite: &Suite,
    order_seed: u64,
    params: &MethodParams,
    sel: &LayerSelector,
) -> Result<BenchResult> {
    let start = Instant::now();
    let order = task_order(suite.tasks.len(), order_seed);
    let depth = suite.config.depth;
    let mut merger = SequentialMerger::new(suite.base.clone(), sel, method, params.clone())?;
    let mut accuracy = Vec::with_capacity(order.len());
    for &task in &order {
        merger.push(&suite.tasks[task].theta)?;
        let state = merger.state();
        let layers = chain_from_layers(state.merged_layers(), state.passthrough(), depth)?;
        let row = order[..accuracy.len() + 1]
            .iter()
            .map(|&i| task_accuracy(&suite.tasks[i], &layers))
            .collect::<Result<Vec<f64>>>()?;
        accuracy.push(row);
    }
    let last = accuracy.last().expect("non-empty suite");
    let acc = last.iter().sum::<f64>() / last.len() as f64;
    let bwt = if accuracy.len() >= 2 {
        Some(evaluate_bwt(&accuracy)?)
    } else {
        None
    };
    Ok(BenchResult {
        method,
        order_seed,
        order,
        accuracy,
        acc,
        bwt,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Merge the suite once per order seed with `method`; orders run in
/// parallel and results come back in the given seed order.
pub fn run_protocol(
    method: MethodId,
    suite: &Suite,
    orders: &[u64],
    params: &MethodParams,
    sel: &LayerSelector,
) -> Result<ProtocolResult> {
    if orders.is_empty() {
        return Err(Error::InvalidConfig("at least one order seed is required".into()));
    }
    if suite.tasks.is_empty() {
        return Err(Error::InvalidConfig("suite has no tasks".into()));
    }
    let results: Vec<BenchResult> = orders
        .par_iter()
        .map(|&seed| {
            run_order(method, suite, seed, params, sel).map_err(|e| e.context(format!("{method}, order seed {seed}")))
        })
        .collect::<Result<_>>()?;
    let accs: Vec<f64> = results.iter().map(|r| r.acc).collect();
    let (acc_mean, acc_std) = mean_std(&accs);
    let bwts: Vec<f64> = results.iter().filter_map(|r| r.bwt).collect();
    let (bwt_mean, bwt_std) = if bwts.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&bwts);
        (Some(m), Some(s))
    };
    Ok(ProtocolResult {
        summary: MethodSummary {
            method,
            orders: results.len(),
            acc_mean,
            acc_std,
            bwt_mean,
            bwt_std,
        },
        results,
    })
}

/// CSV rows `(method, order_seed, task_id, step, accuracy)`; `step` is
/// 1-based.
pub fn write_results_csv<W: Write>(results: &[BenchResult], w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    out.write_record(["method", "order_seed", "task_id", "step", "accuracy"])
        .map_err(csv_err)?;
    for r in results {
        for (s, row) in r.accuracy.iter().enumerate() {
            for (pos, a) in row.iter().enumerate() {
                out.write_record([
                    r.method.as_str().to_string(),
                    r.order_seed.to_string(),
                    r.order[pos].to_string(),
                    (s + 1).to_string(),
                    a.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}
