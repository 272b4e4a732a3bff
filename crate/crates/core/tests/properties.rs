//! Property tests for the structural invariants.

mod common;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tic_core::dataset::Example;
use tic_core::grad::{batch_loss_and_grad, hvp, per_sample_grads};
use tic_core::harness::generalization_gap;
use tic_core::hpo::{select_survivors, RungEntry};
use tic_core::info::{fisher_exact, ggn, grad_covariance, Representation};
use tic_core::linalg::{DenseSymMatrix, DiagVector};
use tic_core::nn::{batch_mean_loss, forward, loss};
use tic_core::stats::{correlations, kendall_tau_b, spearman};
use tic_core::tic::{bias_diag, bias_exact, bias_lower_bound, hutchinson_trace};
use tic_core::{Activation, NetworkSpec, ParamVector, Split, SplitKind};

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(64)
}

fn net(seed: u64, max_params: usize) -> (NetworkSpec, ParamVector, tic_core::LabeledDataset) {
    let mut r = rng(seed);
    let act = if seed % 2 == 0 { Activation::Relu } else { Activation::Identity };
    let spec = random_spec(&mut r, act, max_params);
    let params = random_params(&spec, &mut r, 0.8);
    let n = 3 + (seed % 6) as usize;
    let data = random_dataset(&mut r, spec.input_dim, spec.num_classes, n);
    (spec, params, data)
}

fn shuffled<'a>(batch: &[Example<'a>], seed: u64) -> Vec<Example<'a>> {
    let mut b = batch.to_vec();
    b.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    b
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn forward_is_pure(seed in any::<u64>()) {
        let (spec, params, data) = net(seed, 300);
        let a = forward(&spec, &params, data.row(0)).unwrap();
        let b = forward(&spec, &params, data.row(0)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn loss_is_non_negative(logits in prop::collection::vec(-50.0f64..50.0, 2..8), pick in any::<prop::sample::Index>()) {
        let label = pick.index(logits.len());
        prop_assert!(loss(&logits, label).unwrap() >= 0.0);
    }

    #[test]
    fn mean_loss_ignores_row_order(seed in any::<u64>()) {
        let (spec, params, data) = net(seed, 300);
        let batch = data.examples(SplitKind::Train);
        let a = batch_mean_loss(&spec, &params, &batch).unwrap();
        let b = batch_mean_loss(&spec, &params, &shuffled(&batch, seed)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn batch_gradient_is_additive(seed in any::<u64>()) {
        let (spec, params, data) = net(seed, 300);
        let batch = data.examples(SplitKind::Train);
        let (_, g) = batch_loss_and_grad(&spec, &params, &batch).unwrap();
        let per = per_sample_grads(&spec, &params, &batch).unwrap();
        let n = batch.len() as f64;
        for j in 0..params.len() {
            let sum: f64 = per.iter().map(|p| p[j]).sum();
            prop_assert!((g[j] * n - sum).abs() <= 1e-10 * sum.abs().max(1.0));
        }
    }

    #[test]
    fn hvp_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let (spec, params, data) = net(seed, 300);
        let batch = data.examples(SplitKind::Train);
        let mut r = rng(seed ^ 1);
        let u = normals(&mut r, params.len(), 1.0);
        let v = normals(&mut r, params.len(), 1.0);
        let combo: Vec<f64> = u.iter().zip(&v).map(|(a, b)| alpha * a + beta * b).collect();
        let lhs = hvp(&spec, &params, &batch, &combo).unwrap();
        let hu = hvp(&spec, &params, &batch, &u).unwrap();
        let hv = hvp(&spec, &params, &batch, &v).unwrap();
        let rhs: Vec<f64> = hu.iter().zip(&hv).map(|(a, b)| alpha * a + beta * b).collect();
        prop_assert!(max_abs_diff(&lhs, &rhs) <= 1e-9 * norm(&rhs).max(1.0));
    }

    #[test]
    fn fisher_equals_ggn(seed in any::<u64>()) {
        let (spec, params, data) = net(seed, 300);
        let batch = data.examples(SplitKind::Train);
        let g = ggn(&spec, &params, &batch, Representation::Dense).unwrap().into_dense().unwrap();
        let f = fisher_exact(&spec, &params, &batch, Representation::Dense).unwrap().into_dense().unwrap();
        prop_assert!(g.relative_frobenius_distance(&f) <= 1e-10);
    }

    #[test]
    fn block_and_diag_are_exact_extractions(seed in any::<u64>(), which in 0usize..3) {
        let (spec, params, data) = net(seed, 300);
        let batch = data.examples(SplitKind::Train);
        let build = |rep: Representation| match which {
            0 => ggn(&spec, &params, &batch, rep),
            1 => fisher_exact(&spec, &params, &batch, rep),
            _ => grad_covariance(&spec, &params, &batch, rep),
        }.unwrap();
        let dense = build(Representation::Dense).into_dense().unwrap();
        let block = build(Representation::Block).into_block().unwrap();
        let diag = build(Representation::Diag).into_diag().unwrap();
        let mut start = 0;
        for b in block.blocks() {
            prop_assert_eq!(b, &dense.submatrix(start, b.dim()));
            start += b.dim();
        }
        let dense_diag = dense.diagonal();
        prop_assert_eq!(diag.values(), dense_diag.values());
    }

    #[test]
    fn constructors_ignore_batch_order(seed in any::<u64>()) {
        let (spec, params, data) = net(seed, 200);
        let batch = data.examples(SplitKind::Train);
        let perm = shuffled(&batch, seed ^ 7);
        let dense = |m: tic_core::info::InfoMatrix| m.into_dense().unwrap();
        let pairs = [
            (dense(ggn(&spec, &params, &batch, Representation::Dense).unwrap()),
             dense(ggn(&spec, &params, &perm, Representation::Dense).unwrap())),
            (dense(fisher_exact(&spec, &params, &batch, Representation::Dense).unwrap()),
             dense(fisher_exact(&spec, &params, &perm, Representation::Dense).unwrap())),
            (dense(grad_covariance(&spec, &params, &batch, Representation::Dense).unwrap()),
             dense(grad_covariance(&spec, &params, &perm, Representation::Dense).unwrap())),
        ];
        for (a, b) in &pairs {
            prop_assert!(max_abs_diff(a.values(), b.values()) <= 1e-12 * a.max_abs().max(1.0));
        }
    }

    #[test]
    fn diagonal_bias_dominates_trace_ratio(
        pairs in prop::collection::vec((1e-3f64..10.0, 0.0f64..10.0), 1..40)
    ) {
        let h: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let c: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let b = bias_diag(&DiagVector::new(h.clone()), &DiagVector::new(c.clone()), 0.0).unwrap();
        let lb = bias_lower_bound(c.iter().sum(), h.iter().sum()).unwrap();
        prop_assert!(b >= lb * (1.0 - 1e-12));
    }

    #[test]
    fn exact_bias_is_congruence_invariant(seed in any::<u64>()) {
        let mut r = rng(seed);
        let d = 5;
        let h = spd(&mut r, d, 0.5);
        let c = spd(&mut r, d, 0.0);
        let s: Vec<f64> = (0..d * d).map(|k| if k % (d + 1) == 0 { 2.0 } else { 0.0 } + 0.3 * normal(&mut r)).collect();
        let base = bias_exact(&h, &c, 0.0).unwrap();
        let moved = bias_exact(&congruence(&h, &s, d), &congruence(&c, &s, d), 0.0).unwrap();
        prop_assert!(rel_diff(base, moved) < 1e-8);
    }

    #[test]
    fn exact_bias_decreases_with_damping(seed in any::<u64>()) {
        let mut r = rng(seed);
        let h = spd(&mut r, 6, 0.1);
        let c = spd(&mut r, 6, 0.0);
        let mut prev = f64::INFINITY;
        for k in 0..12 {
            let lambda = if k == 0 { 0.0 } else { 10f64.powi(k - 8) };
            let b = bias_exact(&h, &c, lambda).unwrap();
            prop_assert!(b <= prev * (1.0 + 1e-12));
            prev = b;
        }
    }

    #[test]
    fn rank_correlations_ignore_monotone_transforms(
        pts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..30)
    ) {
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        prop_assume!(xs.iter().any(|&x| x != xs[0]) && ys.iter().any(|&y| y != ys[0]));
        let s = spearman(&xs, &ys).unwrap();
        let k = kendall_tau_b(&xs, &ys).unwrap();
        for f in [f64::exp as fn(f64) -> f64, |x: f64| x * x * x] {
            let tx: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
            let ty: Vec<f64> = ys.iter().map(|&y| f(y)).collect();
            prop_assert!((spearman(&tx, &ty).unwrap() - s).abs() <= 1e-12);
            prop_assert!((kendall_tau_b(&tx, &ty).unwrap() - k).abs() <= 1e-12);
        }
    }

    #[test]
    fn self_correlation_is_exactly_one(xs in prop::collection::vec(-1e3f64..1e3, 3..30)) {
        prop_assume!(xs.iter().any(|&x| x != xs[0]));
        let c = correlations(&xs, &xs).unwrap();
        prop_assert_eq!((c.pearson, c.spearman, c.kendall_tau), (1.0, 1.0, 1.0));
    }

    #[test]
    fn generalization_gap_is_symmetric_in_splits(seed in any::<u64>()) {
        let (spec, params, data) = net(seed, 200);
        let n = data.len();
        let half = n / 2;
        let a = data.with_split(Split { train: (0..half).collect(), validation: vec![], test: (half..n).collect() }).unwrap();
        let b = data.with_split(Split { train: (half..n).collect(), validation: vec![], test: (0..half).collect() }).unwrap();
        prop_assert_eq!(generalization_gap(&spec, &params, &a).unwrap(), generalization_gap(&spec, &params, &b).unwrap());
    }

    #[test]
    fn survivors_ignore_monotone_metric_transforms(
        metrics in prop::collection::vec(prop_oneof![4 => (-10.0f64..10.0).prop_map(Some), 1 => Just(None)], 2..20),
        keep in 1usize..20,
    ) {
        let entries: Vec<RungEntry> = metrics.iter().enumerate().map(|(t, m)| RungEntry {
            trial_id: t,
            metric: m.unwrap_or(f64::NAN),
            diverged_at: if m.is_none() { Some(t * 3) } else { None },
        }).collect();
        let transformed: Vec<RungEntry> = entries.iter().map(|e| RungEntry { metric: (e.metric / 4.0).exp() + 3.0, ..*e }).collect();
        let keep = keep.min(entries.len());
        let mut a = select_survivors(&entries, keep);
        let mut b = select_survivors(&transformed, keep);
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }
}

fn spd(r: &mut impl rand::Rng, d: usize, ridge: f64) -> DenseSymMatrix {
    let a = normals(r, d * d, 1.0);
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            m[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum::<f64>() + if i == j { ridge } else { 0.0 };
        }
    }
    DenseSymMatrix::from_row_major(d, m).unwrap()
}

/// `S^T M S` for row-major `S`.
fn congruence(m: &DenseSymMatrix, s: &[f64], d: usize) -> DenseSymMatrix {
    let mut ms = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            ms[i * d + j] = (0..d).map(|k| m.get(i, k) * s[k * d + j]).sum();
        }
    }
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| s[k * d + i] * ms[k * d + j]).sum();
        }
    }
    DenseSymMatrix::from_row_major(d, out).unwrap()
}

#[test]
fn diagonal_extraction_preserves_trace_ratio_bitwise() {
    let mut r = rng(31);
    for _ in 0..50 {
        let (h, c) = (spd(&mut r, 7, 0.1), spd(&mut r, 7, 0.0));
        assert_eq!(h.diagonal().trace().to_bits(), h.trace().to_bits());
        let from_diag = c.diagonal().trace() / h.diagonal().trace();
        let from_dense = c.trace() / h.trace();
        assert_eq!(from_diag.to_bits(), from_dense.to_bits());
    }
}

#[test]
fn hutchinson_variance_matches_rademacher_formula() {
    let mut r = rng(32);
    let d = 12;
    let m = spd(&mut r, d, 0.0);
    let off: f64 = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| m.get(i, j).powi(2)).sum();
    let samples = 16;
    let analytic = 2.0 * off / samples as f64;
    let estimates: Vec<f64> = (0..400)
        .map(|s| hutchinson_trace(|v| Ok(m.mul_vec(v)), d, samples, s).unwrap().estimate)
        .collect();
    let mean = estimates.iter().sum::<f64>() / estimates.len() as f64;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (estimates.len() - 1) as f64;
    assert!(var > analytic / 2.0 && var < analytic * 2.0, "{var} vs {analytic}");
}
