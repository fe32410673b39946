mod common;

use common::{max_abs_diff, rand_matrix, to_na};
use mergeforge::baselines::{magmax_combine, opcm_layer, ties_combine, trim_top_k, wudi_layer, wudi_loss};
use mergeforge::checkpoint::Tensor;
use mergeforge::linalg::top_right_singular_vectors;
use mergeforge::rng::stream;
use mergeforge::{Checkpoint, DenseMatrix, LayerSelector, MethodId, MethodParams, SequentialMerger, TaskVector};
use rand::Rng;

fn tv(m: DenseMatrix) -> TaskVector {
    let mut t = TaskVector::new("base");
    t.layers.insert("w".into(), m);
    t
}

fn row(v: Vec<f64>) -> DenseMatrix {
    DenseMatrix::from_vec(1, v.len(), v).unwrap()
}

/// Small integers so magnitude ties and zero sign sums actually occur.
fn small_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| f64::from(rng.random_range(-4i32..=4))).collect()
}

fn oracle_trim(v: &[f64], k: f64) -> Vec<f64> {
    let keep = ((k / 100.0) * v.len() as f64).ceil() as usize;
    let mut out = vec![0.0; v.len()];
    let mut taken = vec![false; v.len()];
    for _ in 0..keep.min(v.len()) {
        // Largest remaining magnitude; first index wins.
        let mut best: Option<usize> = None;
        for i in 0..v.len() {
            if taken[i] {
                continue;
            }
            if best.is_none_or(|b| v[i].abs() > v[b].abs()) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out[b] = v[b];
    }
    out
}

fn oracle_ties(a: &[f64], b: &[f64], k: f64) -> Vec<f64> {
    let ta = oracle_trim(a, k);
    let tb = oracle_trim(b, k);
    (0..a.len())
        .map(|i| {
            let s = ta[i] + tb[i];
            if s == 0.0 {
                return 0.0;
            }
            let agree: Vec<f64> = [ta[i], tb[i]]
                .into_iter()
                .filter(|&x| x != 0.0 && (x > 0.0) == (s > 0.0))
                .collect();
            if agree.is_empty() {
                0.0
            } else {
                agree.iter().sum::<f64>() / agree.len() as f64
            }
        })
        .collect()
}

fn oracle_magmax(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| if y.abs() > x.abs() { y } else { x })
        .collect()
}

#[test]
fn ties_matches_brute_force_on_random_small_vectors() {
    let mut rng = stream(1, &["ties"]);
    for case in 0..1000 {
        let n = rng.random_range(1..12);
        let k = [10.0, 20.0, 33.0, 50.0, 100.0][case % 5];
        let a = small_vec(&mut rng, n);
        let b = small_vec(&mut rng, n);
        let got = ties_combine(&tv(row(a.clone())), &tv(row(b.clone())), k).unwrap();
        assert_eq!(
            got.layers["w"].as_slice(),
            oracle_ties(&a, &b, k).as_slice(),
            "case {case}"
        );
        let trimmed = trim_top_k(&row(a.clone()), k);
        assert_eq!(trimmed.as_slice(), oracle_trim(&a, k).as_slice());
    }
}

#[test]
fn ties_support_and_magnitude_bounds() {
    let mut rng = stream(2, &["ties"]);
    for _ in 0..200 {
        let a: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = ties_combine(&tv(row(a.clone())), &tv(row(b.clone())), 30.0).unwrap();
        let (ta, tb) = (oracle_trim(&a, 30.0), oracle_trim(&b, 30.0));
        for (i, &o) in out.layers["w"].as_slice().iter().enumerate() {
            if o != 0.0 {
                assert!(ta[i] != 0.0 || tb[i] != 0.0);
            }
            assert!(o.abs() <= a[i].abs().max(b[i].abs()));
        }
    }
}

#[test]
fn magmax_matches_brute_force_and_is_associative() {
    let mut rng = stream(3, &["magmax"]);
    for case in 0..1000 {
        let n = rng.random_range(1..12);
        let (a, b, c) = (small_vec(&mut rng, n), small_vec(&mut rng, n), small_vec(&mut rng, n));
        let got = magmax_combine(&tv(row(a.clone())), &tv(row(b.clone()))).unwrap();
        assert_eq!(
            got.layers["w"].as_slice(),
            oracle_magmax(&a, &b).as_slice(),
            "case {case}"
        );

        let left = magmax_combine(&got, &tv(row(c.clone()))).unwrap();
        let bc = magmax_combine(&tv(row(b.clone())), &tv(row(c.clone()))).unwrap();
        let right = magmax_combine(&tv(row(a.clone())), &bc).unwrap();
        assert_eq!(left.layers["w"].as_slice(), right.layers["w"].as_slice());
        let idem = magmax_combine(&tv(row(a.clone())), &tv(row(a.clone()))).unwrap();
        assert_eq!(idem.layers["w"].as_slice(), a.as_slice());
    }
}

fn ckpt(w: &DenseMatrix, head: f32) -> Checkpoint {
    Checkpoint::new()
        .with_tensor("blocks.0.w", Tensor::from_matrix(w))
        .unwrap()
        .with_tensor("head.weight", Tensor::new(vec![1, 2], vec![head, -head]).unwrap())
        .unwrap()
}

/// Stored `f32` weights read back in `f64`.
fn stored(m: &DenseMatrix) -> DenseMatrix {
    m.map(|x| f64::from(x as f32))
}

fn run(method: MethodId, params: MethodParams, base: &Checkpoint, thetas: &[Checkpoint]) -> SequentialMerger {
    let mut merger = SequentialMerger::new(base.clone(), &LayerSelector::default(), method, params).unwrap();
    for t in thetas {
        merger.push(t).unwrap();
    }
    merger
}

#[test]
fn recursive_weight_averaging_equals_batch_mean() {
    for seed in 0..20 {
        let base_w = rand_matrix(6, 9, seed);
        let ws: Vec<DenseMatrix> = (0..5).map(|i| rand_matrix(6, 9, 100 * seed + i + 1)).collect();
        let thetas: Vec<Checkpoint> = ws.iter().enumerate().map(|(i, w)| ckpt(w, i as f32)).collect();
        let merger = run(MethodId::Wa, MethodParams::default(), &ckpt(&base_w, 9.0), &thetas);
        let mut mean = DenseMatrix::zeros(6, 9);
        for w in &ws {
            mean.axpy(1.0 / 5.0, &stored(w));
        }
        let got = &merger.state().merged_layers()["blocks.0.w"];
        assert!(max_abs_diff(got, &mean) <= 1e-12, "seed {seed}");
        let head = merger.to_checkpoint().get("head.weight").unwrap().data().to_vec();
        assert_eq!(head, vec![2.0, -2.0]);
    }
}

#[test]
fn recursive_task_arithmetic_equals_batch_sum() {
    let lambda = 0.3;
    for seed in 0..20 {
        let base_w = rand_matrix(6, 9, seed);
        let ws: Vec<DenseMatrix> = (0..6).map(|i| rand_matrix(6, 9, 100 * seed + i + 1)).collect();
        let thetas: Vec<Checkpoint> = ws.iter().map(|w| ckpt(w, 1.0)).collect();
        let params = MethodParams {
            ta_lambda: lambda,
            ..MethodParams::default()
        };
        let merger = run(MethodId::Ta, params, &ckpt(&base_w, 1.0), &thetas);
        let b = stored(&base_w);
        let mut expected = b.clone();
        for w in &ws {
            expected.axpy(lambda, &stored(w).sub(&b));
        }
        let got = &merger.state().merged_layers()["blocks.0.w"];
        assert!(max_abs_diff(got, &expected) <= 1e-12, "seed {seed}");
    }
}

#[test]
fn opcm_projection_is_orthogonal_to_prior_subspace() {
    for seed in 0..200 {
        let k = 1 + seed as usize % 5;
        let cum = rand_matrix(8, k, seed).matmul(&rand_matrix(k, 12, seed ^ 3));
        let tau = rand_matrix(8, 12, seed ^ 5);
        let (_, projected) = opcm_layer(&cum, &tau, 3, 0.5, 128).unwrap();
        let v_prev = top_right_singular_vectors(&cum, 128).unwrap();
        assert_eq!(v_prev.rank(), k);
        let leak = projected.matmul(v_prev.columns()).frobenius_norm();
        assert!(leak <= 1e-9 * tau.frobenius_norm(), "seed {seed}: {leak:e}");
    }
}

/// Minimiser of the WUDI quadratic from its normal equations
/// `τ_m·Σ_i G_i/n_i = Σ_i τ_i·G_i/n_i` with `G_i = τ_iᵀτ_i`, `n_i = ‖τ_i‖_F²`,
/// solved with a pseudo-inverse so singular systems are handled.
pub fn wudi_closed_form(ops: &[&DenseMatrix]) -> DenseMatrix {
    let (r, c) = ops[0].shape();
    let mut lhs = nalgebra::DMatrix::<f64>::zeros(c, c);
    let mut rhs = nalgebra::DMatrix::<f64>::zeros(r, c);
    for t in ops {
        let t = to_na(t);
        let n = t.norm_squared();
        let g = t.transpose() * &t;
        rhs += &t * &g / n;
        lhs += g / n;
    }
    let x = rhs * lhs.pseudo_inverse(1e-12).unwrap();
    DenseMatrix::from_fn(r, c, |i, j| x[(i, j)])
}

#[test]
fn wudi_descent_reaches_the_closed_form_minimum() {
    for seed in 0..20 {
        let a = rand_matrix(5, 8, seed);
        let b = rand_matrix(5, 8, seed ^ 9);
        let ops = [&a, &b];
        let star = wudi_loss(&wudi_closed_form(&ops), &ops);
        // Step sized from the curvature bound: the Hessian's eigenvalues are ≤ 2·#operands.
        let (m, trace) = wudi_layer(&ops, 0.2, 4000).unwrap();
        let fin = wudi_loss(&m, &ops);
        assert!(
            (fin - star).abs() <= 1e-4 * star.max(f64::MIN_POSITIVE),
            "seed {seed}: {fin} vs {star}"
        );
        assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }
}

#[test]
fn wudi_loss_non_increasing_at_default_rate() {
    let p = MethodParams::default();
    for seed in 0..20 {
        let a = rand_matrix(16, 32, seed);
        let b = rand_matrix(16, 32, seed ^ 4);
        let (_, trace) = wudi_layer(&[&a, &b], p.wudi_lr, p.wudi_iters).unwrap();
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
    }
}
