//! Independent oracles: duplicate implementations, finite differences,
//! explicit inverses and direct summation.

mod common;

use common::*;
use nalgebra::DMatrix;
use rand::Rng;
use tic_core::dataset::Example;
use tic_core::grad::{batch_loss_and_grad, ggn_vp, grad, hvp, output_jacobian, per_sample_grads};
use tic_core::harness::{generalization_gap, loocv_estimate, make_blobs, train_to_budget};
use tic_core::info::{ggn, grad_covariance, hessian_finite_difference, ntk_gram, Representation};
use tic_core::linalg::{BlockDiagMatrix, DenseSymMatrix};
use tic_core::nn::{accuracy, batch_mean_loss, forward, loss, mean_loss, softmax};
use tic_core::tic::{bias_block, bias_exact, hutchinson_trace};
use tic_core::{train, Activation, LabeledDataset, NetworkSpec, ParamVector, Split, SplitKind, TrainConfig};

fn all_examples(data: &LabeledDataset) -> Vec<Example<'_>> {
    data.examples(SplitKind::Train)
}

#[test]
fn forward_matches_straight_line_reimplementation() {
    let mut r = rng(11);
    for case in 0..60 {
        let act = if case % 2 == 0 { Activation::Relu } else { Activation::Identity };
        let spec = random_spec(&mut r, act, 400);
        let params = random_params(&spec, &mut r, 0.7);
        let x = normals(&mut r, spec.input_dim, 1.0);
        let got = forward(&spec, &params, &x).unwrap();
        let (want, _) = reference_forward(&spec, params.values(), &x);
        for (g, w) in got.iter().zip(&want) {
            assert!(rel_diff(*g, *w) < 1e-12 || (g - w).abs() < 1e-14, "case {case}: {g} vs {w}");
        }
    }
}

#[test]
fn identity_network_collapses_to_one_affine_map() {
    let mut r = rng(12);
    for _ in 0..20 {
        let depth = r.random_range(1..=3);
        let widths: Vec<usize> = (0..depth).map(|_| r.random_range(1..=5)).collect();
        let spec = NetworkSpec::new(4, widths, 3, Activation::Identity, false).unwrap();
        let params = random_params(&spec, &mut r, 0.8);
        // Compose the layers as matrices: M <- W M, c <- W c + b.
        let mut m = DMatrix::<f64>::identity(4, 4);
        let mut c = nalgebra::DVector::<f64>::zeros(4);
        for seg in params.layout() {
            let w = DMatrix::from_row_slice(seg.fan_out, seg.fan_in, &params.values()[seg.weight_range()]);
            let b = nalgebra::DVector::from_column_slice(&params.values()[seg.bias_range()]);
            m = &w * m;
            c = &w * c + b;
        }
        let x = normals(&mut r, 4, 1.0);
        let collapsed = &m * nalgebra::DVector::from_column_slice(&x) + c;
        let logits = forward(&spec, &params, &x).unwrap();
        for k in 0..3 {
            assert!(rel_diff(logits[k], collapsed[k]) < 1e-10 || (logits[k] - collapsed[k]).abs() < 1e-13);
        }
    }
}

#[test]
fn batch_loss_is_the_mean_of_example_losses() {
    let mut r = rng(13);
    let spec = NetworkSpec::new(3, vec![4], 3, Activation::Relu, false).unwrap();
    let params = random_params(&spec, &mut r, 1.0);
    let data = random_dataset(&mut r, 3, 3, 5);
    let mut sum = 0.0;
    for i in 0..5 {
        let (logits, _) = reference_forward(&spec, params.values(), data.row(i));
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        sum += lse - logits[data.labels()[i]];
    }
    let mean = batch_mean_loss(&spec, &params, &all_examples(&data)).unwrap();
    assert!(rel_diff(mean, sum / 5.0) < 1e-12);
}

#[test]
fn gradient_matches_central_differences() {
    let mut r = rng(14);
    let mut checked = 0;
    while checked < 30 {
        let act = if checked % 2 == 0 { Activation::Relu } else { Activation::Identity };
        let spec = random_spec(&mut r, act, 200);
        let params = random_params(&spec, &mut r, 0.7);
        let data = random_dataset(&mut r, spec.input_dim, spec.num_classes, 1);
        if kink_margin(&spec, &params, &data) <= 1e-3 {
            continue;
        }
        let (x, y) = (data.row(0), data.labels()[0]);
        let g = grad(&spec, &params, x, y).unwrap();
        let h = 1e-5;
        for j in 0..params.len() {
            let mut p = params.clone();
            p.values_mut()[j] += h;
            let lp = loss(&forward(&spec, &p, x).unwrap(), y).unwrap();
            p.values_mut()[j] -= 2.0 * h;
            let lm = loss(&forward(&spec, &p, x).unwrap(), y).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!((g[j] - fd).abs() < 1e-4, "coordinate {j}: {} vs {fd}", g[j]);
        }
        checked += 1;
    }
}

#[test]
fn mean_of_per_sample_gradients_is_the_batch_gradient() {
    let mut r = rng(15);
    let spec = NetworkSpec::new(3, vec![5, 5], 4, Activation::Relu, true).unwrap();
    let params = random_params(&spec, &mut r, 0.6);
    let data = random_dataset(&mut r, 3, 4, 7);
    let batch = all_examples(&data);
    let per = per_sample_grads(&spec, &params, &batch).unwrap();
    let (_, g) = batch_loss_and_grad(&spec, &params, &batch).unwrap();
    for j in 0..params.len() {
        let mean = per.iter().map(|p| p[j]).sum::<f64>() / 7.0;
        assert!((mean - g[j]).abs() < 1e-10);
    }
}

#[test]
fn affine_model_jacobian_has_kronecker_form() {
    let mut r = rng(16);
    let spec = NetworkSpec::new(4, vec![], 3, Activation::Identity, false).unwrap();
    let params = random_params(&spec, &mut r, 1.0);
    let x = normals(&mut r, 4, 1.0);
    let jac = output_jacobian(&spec, &params, &x).unwrap();
    for k in 0..3 {
        for row in 0..3 {
            for col in 0..4 {
                let want = if row == k { x[col] } else { 0.0 };
                assert_eq!(jac.get(k, row * 4 + col), want);
            }
            assert_eq!(jac.get(k, 12 + row), if row == k { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn jacobian_matches_central_differences() {
    let mut r = rng(17);
    let mut checked = 0;
    while checked < 20 {
        let spec = random_spec(&mut r, Activation::Relu, 200);
        let params = random_params(&spec, &mut r, 0.7);
        let data = random_dataset(&mut r, spec.input_dim, spec.num_classes, 1);
        if kink_margin(&spec, &params, &data) <= 1e-3 {
            continue;
        }
        let x = data.row(0);
        let jac = output_jacobian(&spec, &params, x).unwrap();
        let h = 1e-5;
        for j in 0..params.len() {
            let mut p = params.clone();
            p.values_mut()[j] += h;
            let fp = forward(&spec, &p, x).unwrap();
            p.values_mut()[j] -= 2.0 * h;
            let fm = forward(&spec, &p, x).unwrap();
            for k in 0..spec.num_classes {
                assert!((jac.get(k, j) - (fp[k] - fm[k]) / (2.0 * h)).abs() < 1e-4);
            }
        }
        checked += 1;
    }
}

/// `(1/n) sum J^T (diag p - p p^T) J v` from explicit Jacobians.
fn explicit_ggn_times(spec: &NetworkSpec, params: &ParamVector, batch: &[Example<'_>], v: &[f64]) -> Vec<f64> {
    let d = params.len();
    let k = spec.num_classes;
    let mut out = vec![0.0; d];
    for ex in batch {
        let jac = output_jacobian(spec, params, ex.x).unwrap();
        let p = softmax(&forward(spec, params, ex.x).unwrap());
        let jv: Vec<f64> = (0..k).map(|a| (0..d).map(|j| jac.get(a, j) * v[j]).sum()).collect();
        let pjv: f64 = p.iter().zip(&jv).map(|(a, b)| a * b).sum();
        let hjv: Vec<f64> = (0..k).map(|a| p[a] * (jv[a] - pjv)).collect();
        for j in 0..d {
            out[j] += (0..k).map(|a| jac.get(a, j) * hjv[a]).sum::<f64>() / batch.len() as f64;
        }
    }
    out
}

#[test]
fn linear_softmax_hvp_is_the_explicit_ggn_product() {
    let mut r = rng(18);
    let spec = NetworkSpec::new(5, vec![], 4, Activation::Identity, false).unwrap();
    let params = random_params(&spec, &mut r, 0.5);
    let data = random_dataset(&mut r, 5, 4, 9);
    let batch = all_examples(&data);
    let dense = ggn(&spec, &params, &batch, Representation::Dense).unwrap().into_dense().unwrap();
    for _ in 0..5 {
        let v = normals(&mut r, params.len(), 1.0);
        let hv = hvp(&spec, &params, &batch, &v).unwrap();
        let gv = dense.mul_vec(&v);
        assert!(max_abs_diff(&hv, &gv) <= 1e-8 * norm(&gv));
    }
}

#[test]
fn stacked_jacobians_reproduce_gauss_newton_products() {
    let mut r = rng(19);
    for _ in 0..10 {
        let spec = random_spec(&mut r, Activation::Relu, 300);
        let params = random_params(&spec, &mut r, 0.6);
        let data = random_dataset(&mut r, spec.input_dim, spec.num_classes, 6);
        let batch = all_examples(&data);
        let v = normals(&mut r, params.len(), 1.0);
        let want = explicit_ggn_times(&spec, &params, &batch, &v);
        let got = ggn_vp(&spec, &params, &batch, &v).unwrap();
        assert!(max_abs_diff(&got, &want) <= 1e-8 * norm(&want).max(1e-12));
    }
}

#[test]
fn hvp_matches_finite_difference_hessian_columns() {
    let mut r = rng(20);
    let mut checked = 0;
    while checked < 8 {
        let spec = random_spec(&mut r, Activation::Relu, 120);
        let params = random_params(&spec, &mut r, 0.7);
        let data = random_dataset(&mut r, spec.input_dim, spec.num_classes, 4);
        if kink_margin(&spec, &params, &data) <= 1e-3 {
            continue;
        }
        let batch = all_examples(&data);
        let fd = hessian_finite_difference(&spec, &params, &batch, 1e-5, 5000).unwrap();
        let mut e = vec![0.0; params.len()];
        for j in 0..params.len() {
            e[j] = 1.0;
            let col = hvp(&spec, &params, &batch, &e).unwrap();
            e[j] = 0.0;
            for i in 0..params.len() {
                assert!((col[i] - fd.get(i, j)).abs() < 1e-5, "({i},{j}) {} vs {}", col[i], fd.get(i, j));
            }
        }
        checked += 1;
    }
}

#[test]
fn bias_only_binary_model_at_uniform_logits_has_trace_one_half() {
    let spec = NetworkSpec::new(1, vec![], 2, Activation::Identity, false).unwrap();
    let params = ParamVector::zeros(&spec);
    let x = [0.0];
    let batch = [Example { x: &x, label: 0 }];
    let h = ggn(&spec, &params, &batch, Representation::Diag).unwrap();
    assert_eq!(h.trace(), 0.5);
}

#[test]
fn gradient_covariance_matches_naive_double_loop() {
    let mut r = rng(21);
    for _ in 0..5 {
        let spec = random_spec(&mut r, Activation::Relu, 100);
        let params = random_params(&spec, &mut r, 0.7);
        let data = random_dataset(&mut r, spec.input_dim, spec.num_classes, 8);
        let batch = all_examples(&data);
        let c = grad_covariance(&spec, &params, &batch, Representation::Dense).unwrap().into_dense().unwrap();
        let grads: Vec<Vec<f64>> = batch.iter().map(|e| grad(&spec, &params, e.x, e.label).unwrap()).collect();
        let d = params.len();
        for a in 0..d {
            for b in 0..d {
                let mut s = 0.0;
                for g in &grads {
                    s += g[a] * g[b];
                }
                s /= grads.len() as f64;
                assert!((c.get(a, b) - s).abs() <= 1e-12 * s.abs().max(1.0));
            }
        }
    }
}

fn random_psd(r: &mut impl Rng, dim: usize, rank: usize, ridge: f64) -> DenseSymMatrix {
    let a = DMatrix::from_fn(dim, rank, |_, _| normal(r));
    let m = &a * a.transpose() + DMatrix::identity(dim, dim) * ridge;
    DenseSymMatrix::from_row_major(dim, m.transpose().as_slice().to_vec()).unwrap()
}

fn to_na(m: &DenseSymMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.dim(), m.dim(), m.values())
}

#[test]
fn exact_bias_matches_explicit_inverse() {
    let mut r = rng(22);
    for _ in 0..20 {
        let h = random_psd(&mut r, 6, 6, 0.1);
        let c = random_psd(&mut r, 6, 3, 0.0);
        let lambda = 0.05;
        let shifted = to_na(&h) + DMatrix::identity(6, 6) * lambda;
        let want = (shifted.try_inverse().unwrap() * to_na(&c)).trace();
        let got = bias_exact(&h, &c, lambda).unwrap();
        assert!(rel_diff(got, want) < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn block_bias_matches_per_block_inverse() {
    let mut r = rng(23);
    for _ in 0..10 {
        let (h1, h2) = (random_psd(&mut r, 4, 4, 0.2), random_psd(&mut r, 3, 3, 0.2));
        let (c1, c2) = (random_psd(&mut r, 4, 2, 0.0), random_psd(&mut r, 3, 2, 0.0));
        let lambda = 1e-3;
        let mut want = 0.0;
        for (h, c) in [(&h1, &c1), (&h2, &c2)] {
            let n = h.dim();
            want += ((to_na(h) + DMatrix::identity(n, n) * lambda).try_inverse().unwrap() * to_na(c)).trace();
        }
        let got = bias_block(
            &BlockDiagMatrix::new(vec![h1, h2]),
            &BlockDiagMatrix::new(vec![c1, c2]),
            lambda,
        )
        .unwrap();
        assert!(rel_diff(got, want) < 1e-10);
    }
}

#[test]
fn hutchinson_recovers_explicit_trace() {
    let mut r = rng(24);
    let n = 50;
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = if i == j { 1.0 + normal(&mut r) } else { 0.1 * normal(&mut r) };
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    let m = DenseSymMatrix::from_row_major(n, values).unwrap();
    let est = hutchinson_trace(|v| Ok(m.mul_vec(v)), n, 10_000, 5).unwrap();
    assert!((est.estimate - m.trace()).abs() < 3.0 * est.standard_error);
    assert!(rel_diff(est.estimate, m.trace()) < 0.02);
}

#[test]
fn well_separated_blobs_are_learned_by_a_linear_model() {
    let data = make_blobs(2, 2, 400, 10.0, 1).unwrap();
    let spec = NetworkSpec::new(2, vec![], 2, Activation::Identity, false).unwrap();
    let cfg = TrainConfig {
        eta: 0.1,
        rho: 1.0,
        delta: 1.0,
        lambda_wd: 0.0,
        gamma: 0.9,
        batch_size: 28,
        step_budget: 200,
        seed: 3,
    };
    let (params, _) = train_to_budget(&spec, &data, &cfg).unwrap();
    assert!(accuracy(&spec, &params, &data, SplitKind::Test).unwrap() > 0.99);
}

#[test]
fn indistinguishable_blobs_stay_at_chance() {
    let k = 4;
    let data = make_blobs(k, 3, 2000, 0.0, 2).unwrap();
    let spec = NetworkSpec::new(3, vec![], k, Activation::Identity, false).unwrap();
    let cfg = TrainConfig {
        eta: 0.05,
        rho: 1.0,
        delta: 1.0,
        lambda_wd: 0.0,
        gamma: 0.9,
        batch_size: 100,
        step_budget: 300,
        seed: 4,
    };
    let (params, _) = train_to_budget(&spec, &data, &cfg).unwrap();
    let acc = accuracy(&spec, &params, &data, SplitKind::Test).unwrap();
    let chance = 1.0 / k as f64;
    assert!((acc - chance).abs() <= 0.1, "{acc}");
}

#[test]
fn untrained_model_on_random_labels_has_small_gap() {
    let mut r = rng(25);
    let n = 1000;
    let features = normals(&mut r, n * 8, 1.0);
    let labels = (0..n).map(|_| r.random_range(0..10)).collect();
    let data = LabeledDataset::new(features, 8, labels, 10, Split::random(n, 0.5, 0.0, 1)).unwrap();
    let spec = NetworkSpec::new(8, vec![16], 10, Activation::Relu, false).unwrap();
    let params = ParamVector::init(&spec, 9);
    assert!(generalization_gap(&spec, &params, &data).unwrap() < 0.2);
}

#[test]
fn memorized_tiny_training_set_has_large_gap() {
    let mut r = rng(26);
    let n = 508;
    let features = normals(&mut r, n * 6, 1.0);
    let labels = (0..n).map(|_| r.random_range(0..3)).collect();
    let split = Split {
        train: (0..8).collect(),
        validation: vec![],
        test: (8..n).collect(),
    };
    let data = LabeledDataset::new(features, 6, labels, 3, split).unwrap();
    let spec = NetworkSpec::new(6, vec![32], 3, Activation::Relu, false).unwrap();
    let cfg = TrainConfig {
        eta: 0.1,
        rho: 1.0,
        delta: 1.0,
        lambda_wd: 0.0,
        gamma: 0.9,
        batch_size: 8,
        step_budget: 2000,
        seed: 5,
    };
    let (params, _) = train_to_budget(&spec, &data, &cfg).unwrap();
    assert!(generalization_gap(&spec, &params, &data).unwrap() > 0.5);
}

#[test]
fn parameter_ratio_for_three_layer_identity_network() {
    let data = make_blobs(3, 2, 720, 2.0, 0).unwrap();
    let spec = NetworkSpec::new(2, vec![16, 16, 16], 3, Activation::Identity, false).unwrap();
    // (2*16 + 16) + 2 * (16*16 + 16) + (16*3 + 3)
    assert_eq!(spec.num_params(), 48 + 544 + 51);
    assert_eq!(data.indices(SplitKind::Train).len(), 504);
}

#[test]
fn loocv_on_duplicated_point_trains_on_the_twin() {
    let features = vec![0.3, -1.2, 0.3, -1.2];
    let split = Split {
        train: vec![0, 1],
        validation: vec![],
        test: vec![],
    };
    let data = LabeledDataset::new(features, 2, vec![1, 1], 2, split).unwrap();
    let spec = NetworkSpec::new(2, vec![3], 2, Activation::Relu, false).unwrap();
    let cfg = TrainConfig {
        eta: 0.1,
        rho: 1.0,
        delta: 1.0,
        lambda_wd: 0.0,
        gamma: 0.5,
        batch_size: 2,
        step_budget: 25,
        seed: 6,
    };
    let got = loocv_estimate(&spec, &data, &cfg).unwrap();
    let single = data
        .with_split(Split {
            train: vec![0],
            validation: vec![],
            test: vec![1],
        })
        .unwrap();
    let single_cfg = TrainConfig { batch_size: 1, ..cfg };
    let (params, _) = train_to_budget(&spec, &single, &single_cfg).unwrap();
    let want = mean_loss(&spec, &params, &single, SplitKind::Test).unwrap();
    assert_eq!(got, want);
}

#[test]
fn linear_blob_training_reaches_low_loss_deterministically() {
    let data = make_blobs(2, 2, 200, 6.0, 7).unwrap();
    let spec = NetworkSpec::new(2, vec![4], 2, Activation::Identity, false).unwrap();
    let cfg = TrainConfig {
        eta: 0.05,
        rho: 0.5,
        delta: 0.8,
        lambda_wd: 0.0,
        gamma: 0.9,
        batch_size: 20,
        step_budget: 300,
        seed: 8,
    };
    let a = train(&spec, &data, &cfg).unwrap();
    let b = train(&spec, &data, &cfg).unwrap();
    assert!(a.snapshots.last().unwrap().train_loss < 0.1);
    assert_eq!(a.snapshots, b.snapshots);
    let sa: Vec<u64> = a.snapshots.iter().flat_map(|s| s.params.values().iter().map(|v| v.to_bits())).collect();
    let sb: Vec<u64> = b.snapshots.iter().flat_map(|s| s.params.values().iter().map(|v| v.to_bits())).collect();
    assert_eq!(sa, sb);
}

#[test]
fn frozen_parameters_have_zero_kernel_drift() {
    let data = make_blobs(3, 4, 100, 2.0, 9).unwrap();
    let spec = NetworkSpec::new(4, vec![8, 8], 3, Activation::Relu, false).unwrap();
    let cfg = TrainConfig {
        eta: 0.0,
        rho: 1.0,
        delta: 1.0,
        lambda_wd: 0.0,
        gamma: 0.0,
        batch_size: 10,
        step_budget: 30,
        seed: 1,
    };
    let outcome = train(&spec, &data, &cfg).unwrap();
    let probe: Vec<&[f64]> = (0..10).map(|i| data.row(i)).collect();
    let k0 = ntk_gram(&spec, &outcome.snapshots[0].params, &probe).unwrap();
    for s in &outcome.snapshots {
        assert_eq!(ntk_gram(&spec, &s.params, &probe).unwrap().relative_drift(&k0), 0.0);
    }
}
