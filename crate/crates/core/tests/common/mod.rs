//! Fixtures shared by the integration tests: random networks and data, plus
//! a straight-line forward pass written independently of the library.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tic_core::{Activation, LabeledDataset, NetworkSpec, ParamVector, Split};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normals(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * normal(rng)).collect()
}

/// Random architecture with at most `max_params` parameters.
pub fn random_spec(rng: &mut impl Rng, activation: Activation, max_params: usize) -> NetworkSpec {
    loop {
        let input_dim = rng.random_range(1..=6);
        let num_classes = rng.random_range(2..=4);
        let depth = rng.random_range(0..=3);
        let skip = depth >= 2 && rng.random::<bool>();
        let hidden_widths = if skip {
            vec![rng.random_range(1..=6); depth]
        } else {
            (0..depth).map(|_| rng.random_range(1..=6)).collect()
        };
        let spec = NetworkSpec::new(input_dim, hidden_widths, num_classes, activation, skip).unwrap();
        if spec.num_params() <= max_params {
            return spec;
        }
    }
}

pub fn random_params(spec: &NetworkSpec, rng: &mut impl Rng, scale: f64) -> ParamVector {
    ParamVector::from_values(spec, normals(rng, spec.num_params(), scale)).unwrap()
}

/// Random features and labels, everything in the training split.
pub fn random_dataset(rng: &mut impl Rng, dim: usize, num_classes: usize, n: usize) -> LabeledDataset {
    let features = normals(rng, n * dim, 1.0);
    let labels = (0..n).map(|_| rng.random_range(0..num_classes)).collect();
    let split = Split {
        train: (0..n).collect(),
        validation: vec![],
        test: vec![],
    };
    LabeledDataset::new(features, dim, labels, num_classes, split).unwrap()
}

/// Logits plus every hidden pre-activation, from the flat vector directly:
/// per layer a row-major `fan_out x fan_in` weight block then the bias.
pub fn reference_forward(spec: &NetworkSpec, theta: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut widths = vec![spec.input_dim];
    widths.extend(&spec.hidden_widths);
    widths.push(spec.num_classes);
    let hidden = spec.hidden_widths.len();
    let mut h = x.to_vec();
    let mut offset = 0;
    let mut pre_acts = Vec::new();
    for l in 0..widths.len() - 1 {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        let w = &theta[offset..offset + fan_in * fan_out];
        let b = &theta[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let mut z = vec![0.0; fan_out];
        for r in 0..fan_out {
            let mut s = b[r];
            for c in 0..fan_in {
                s += w[r * fan_in + c] * h[c];
            }
            z[r] = s;
        }
        if l < hidden {
            pre_acts.extend(&z);
            let mut next: Vec<f64> = z
                .iter()
                .map(|&v| match spec.activation {
                    Activation::Identity => v,
                    Activation::Relu => v.max(0.0),
                })
                .collect();
            if spec.skip_connections && l >= 1 {
                for (n, p) in next.iter_mut().zip(&h) {
                    *n += p;
                }
            }
            h = next;
        } else {
            h = z;
        }
    }
    assert_eq!(offset, theta.len());
    (h, pre_acts)
}

/// Smallest hidden pre-activation magnitude over the dataset rows.
pub fn kink_margin(spec: &NetworkSpec, params: &ParamVector, data: &LabeledDataset) -> f64 {
    (0..data.len())
        .flat_map(|i| reference_forward(spec, params.values(), data.row(i)).1)
        .fold(f64::INFINITY, |m, z| m.min(z.abs()))
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}
