//! The TIC bias term `Tr((H + lambda I)^{-1} C)` at several fidelities, the
//! Hutchinson trace estimator, and the per-snapshot [`TicReport`].
//!
//! `H` is the Fisher (equal to the Gauss-Newton matrix for softmax
//! cross-entropy) unless an audit run asks for a finite-difference Hessian.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledDataset, SplitKind};
use crate::error::{Result, TicError};
use crate::grad::hvp;
use crate::info::{
    fisher_exact, fisher_mc, grad_covariance, hessian_finite_difference, Assembly, InfoMatrix, Representation,
    DEFAULT_DENSE_CAP,
};
use crate::linalg::{BlockDiagMatrix, Cholesky, DenseSymMatrix, DiagVector};
use crate::nn::{mean_loss, NetworkSpec, ParamVector};

/// `Tr((H + lambda I)^{-1} C)` through a Cholesky factorization.
pub fn bias_exact(h: &DenseSymMatrix, c: &DenseSymMatrix, lambda: f64) -> Result<f64> {
    if h.dim() != c.dim() {
        return Err(TicError::DimensionMismatch {
            what: "H and C",
            expected: h.dim(),
            actual: c.dim(),
        });
    }
    check_lambda(lambda)?;
    let chol = Cholesky::factor(h, lambda)?;
    Ok(chol.trace_inv_times(c))
}

/// Sum of per-block exact bias terms.
pub fn bias_block(h: &BlockDiagMatrix, c: &BlockDiagMatrix, lambda: f64) -> Result<f64> {
    if h.block_sizes() != c.block_sizes() {
        return Err(TicError::InvalidArgument("H and C block structures differ".into()));
    }
    check_lambda(lambda)?;
    let mut total = 0.0;
    for (block, (hb, cb)) in h.blocks().iter().zip(c.blocks()).enumerate() {
        let chol = Cholesky::factor(hb, lambda).map_err(|e| match e {
            TicError::NotPositiveDefinite { index, pivot } => TicError::BlockNotPositiveDefinite { block, index, pivot },
            other => other,
        })?;
        total += chol.trace_inv_times(cb);
    }
    Ok(total)
}

/// `sum_i c_i / (h_i + lambda)`.
pub fn bias_diag(h: &DiagVector, c: &DiagVector, lambda: f64) -> Result<f64> {
    if h.len() != c.len() {
        return Err(TicError::DimensionMismatch {
            what: "diagonal of C",
            expected: h.len(),
            actual: c.len(),
        });
    }
    check_lambda(lambda)?;
    let mut total = 0.0;
    for (i, (&hi, &ci)) in h.values().iter().zip(c.values()).enumerate() {
        let denom = hi + lambda;
        if !(denom > 0.0) {
            return Err(TicError::InvalidArgument(format!(
                "diagonal entry {i} gives non-positive h + lambda = {denom:e}"
            )));
        }
        total += ci / denom;
    }
    Ok(total)
}

/// `Tr(C) / Tr(H)`, a lower bound on the diagonal bias term.
pub fn bias_lower_bound(trace_c: f64, trace_h: f64) -> Result<f64> {
    if !(trace_h > 0.0) {
        return Err(TicError::InvalidArgument(format!("trace of H must be positive, got {trace_h:e}")));
    }
    if trace_c < 0.0 {
        return Err(TicError::InvalidArgument(format!("trace of C must be non-negative, got {trace_c:e}")));
    }
    Ok(trace_c / trace_h)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(TicError::InvalidArgument(format!("damping must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

/// Damping relative to the mean curvature: `max(1e-5 * Tr(H) / d, 1e-8)`.
pub fn default_damping(trace_h: f64, dim: usize) -> f64 {
    if dim == 0 {
        return 1e-8;
    }
    (1e-5 * trace_h / dim as f64).max(1e-8)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub estimate: f64,
    pub standard_error: f64,
}

/// Hutchinson's estimator: mean of `v^T M v` over Rademacher vectors `v`.
pub fn hutchinson_trace<F>(mut matvec: F, dim: usize, num_samples: usize, seed: u64) -> Result<TraceEstimate>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if num_samples < 2 {
        return Err(TicError::InvalidArgument("Hutchinson needs at least 2 samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(num_samples);
    let mut v = vec![0.0; dim];
    for _ in 0..num_samples {
        for slot in v.iter_mut() {
            *slot = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
        let mv = matvec(&v)?;
        if mv.len() != dim {
            return Err(TicError::DimensionMismatch {
                what: "matrix-vector product",
                expected: dim,
                actual: mv.len(),
            });
        }
        samples.push(v.iter().zip(&mv).map(|(a, b)| a * b).sum::<f64>());
    }
    let n = num_samples as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    Ok(TraceEstimate {
        estimate: mean,
        standard_error: (var / n).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    Exact,
    Block,
    Diag,
    LowerBound,
}

/// Which matrix stands in for `H`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Curvature {
    /// Closed-form Fisher, equal to the Gauss-Newton matrix.
    ExactFisher,
    /// Fisher from `samples` model-drawn labels per input.
    MonteCarloFisher { samples: usize },
    /// Central differences of the gradient. Dense only; for audits.
    FiniteDifference { step: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    /// Trace of the assembled curvature diagonal.
    Assembled,
    /// Hutchinson estimate from Hessian-vector products.
    Hutchinson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TicConfig {
    /// Requested estimators. Diagonal and lower-bound estimates are always
    /// produced since they share the cheap diagonal assembly.
    pub fidelities: Vec<Fidelity>,
    /// Estimator feeding `tic_score`; the most accurate one computed when unset.
    pub score_fidelity: Option<Fidelity>,
    /// Split the matrices are estimated on.
    pub matrix_split: SplitKind,
    /// Fixed damping; relative default when unset.
    pub damping: Option<f64>,
    pub curvature: Curvature,
    pub trace_h: TraceSource,
    pub hutchinson_samples: usize,
    pub dense_cap: usize,
    pub seed: u64,
}

impl Default for TicConfig {
    fn default() -> Self {
        TicConfig {
            fidelities: vec![Fidelity::Diag, Fidelity::LowerBound],
            score_fidelity: None,
            matrix_split: SplitKind::Validation,
            damping: None,
            curvature: Curvature::ExactFisher,
            trace_h: TraceSource::Assembled,
            hutchinson_samples: 64,
            dense_cap: DEFAULT_DENSE_CAP,
            seed: 0,
        }
    }
}

/// Every estimator output for one parameter snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TicReport {
    pub bias_exact: Option<f64>,
    pub bias_block: Option<f64>,
    pub bias_diag: f64,
    pub bias_lower_bound: f64,
    pub trace_h: f64,
    pub trace_h_standard_error: Option<f64>,
    pub trace_c: f64,
    pub trace_f: f64,
    pub damping_lambda: f64,
    pub mean_empirical_loss: f64,
    pub tic_score: f64,
    pub score_fidelity: Fidelity,
    pub num_params: usize,
    pub n_train: usize,
    pub n_matrix: usize,
    pub fidelity_flags: BTreeSet<Fidelity>,
}

impl TicReport {
    pub fn bias(&self, fidelity: Fidelity) -> Option<f64> {
        match fidelity {
            Fidelity::Exact => self.bias_exact,
            Fidelity::Block => self.bias_block,
            Fidelity::Diag => Some(self.bias_diag),
            Fidelity::LowerBound => Some(self.bias_lower_bound),
        }
    }

    /// Field names of the flat JSON form, in serialization order.
    pub const FIELDS: [&'static str; 16] = [
        "bias_exact",
        "bias_block",
        "bias_diag",
        "bias_lower_bound",
        "trace_h",
        "trace_h_standard_error",
        "trace_c",
        "trace_f",
        "damping_lambda",
        "mean_empirical_loss",
        "tic_score",
        "score_fidelity",
        "num_params",
        "n_train",
        "n_matrix",
        "fidelity_flags",
    ];
}

/// Assembles `H` and `C` on the configured split and evaluates every
/// requested estimator with a shared damping value.
///
/// `tic_score` is the training loss plus `bias / n_train`.
pub fn tic_report(
    spec: &NetworkSpec,
    params: &ParamVector,
    dataset: &LabeledDataset,
    config: &TicConfig,
) -> Result<TicReport> {
    params.check(spec)?;
    let batch = dataset.examples(config.matrix_split);
    if batch.is_empty() {
        return Err(TicError::Empty("matrix split"));
    }
    let n_train = dataset.indices(SplitKind::Train).len();
    let mean_empirical_loss = mean_loss(spec, params, dataset, SplitKind::Train)?;
    let d = params.len();

    let want_exact = config.fidelities.contains(&Fidelity::Exact);
    let want_block = config.fidelities.contains(&Fidelity::Block);
    let needs_dense = want_exact || matches!(config.curvature, Curvature::FiniteDifference { .. });
    let representation = if needs_dense {
        Representation::Dense
    } else if want_block {
        Representation::Block
    } else {
        Representation::Diag
    };
    let assembly = Assembly::new(representation).with_cap(config.dense_cap);

    let h = match config.curvature {
        Curvature::ExactFisher => fisher_exact(spec, params, &batch, assembly)?,
        Curvature::MonteCarloFisher { samples } => fisher_mc(spec, params, &batch, samples, config.seed, assembly)?,
        Curvature::FiniteDifference { step } => {
            InfoMatrix::Dense(hessian_finite_difference(spec, params, &batch, step, config.dense_cap)?)
        }
    };
    let c = grad_covariance(spec, params, &batch, assembly)?;

    let h_diag = h.diagonal().clamped();
    let c_diag = c.diagonal().clamped();
    let trace_f = h_diag.trace();
    let trace_c = c_diag.trace();
    let (trace_h, trace_h_standard_error) = match config.trace_h {
        TraceSource::Assembled => (trace_f, None),
        TraceSource::Hutchinson => {
            let est = hutchinson_trace(
                |v| hvp(spec, params, &batch, v),
                d,
                config.hutchinson_samples,
                config.seed ^ 0x9e37_79b9_7f4a_7c15,
            )?;
            (est.estimate, Some(est.standard_error))
        }
    };
    let lambda = match config.damping {
        Some(l) => {
            check_lambda(l)?;
            l
        }
        None => default_damping(trace_h.max(0.0), d),
    };

    let mut flags = BTreeSet::new();
    let bias_diag = bias_diag(&h_diag, &c_diag, lambda)?;
    flags.insert(Fidelity::Diag);
    // Damped form of the bound: Tr(C) / Tr(H + lambda I).
    let bias_lower_bound = bias_lower_bound(trace_c, trace_h + d as f64 * lambda)?;
    flags.insert(Fidelity::LowerBound);

    let block_sizes: Vec<usize> = params.layout().iter().map(|s| s.len()).collect();
    let mut bias_exact_value = None;
    let mut bias_block_value = None;
    match (&h, &c) {
        (InfoMatrix::Dense(hd), InfoMatrix::Dense(cd)) => {
            if want_exact {
                bias_exact_value = Some(bias_exact(hd, cd, lambda)?);
                flags.insert(Fidelity::Exact);
            }
            if want_block {
                let hb = hd.to_blocks(&block_sizes)?;
                let cb = cd.to_blocks(&block_sizes)?;
                bias_block_value = Some(bias_block(&hb, &cb, lambda)?);
                flags.insert(Fidelity::Block);
            }
        }
        (InfoMatrix::Block(hb), InfoMatrix::Block(cb)) => {
            bias_block_value = Some(bias_block(hb, cb, lambda)?);
            flags.insert(Fidelity::Block);
        }
        _ => {}
    }

    let score_fidelity = match config.score_fidelity {
        Some(f) => {
            if !flags.contains(&f) {
                return Err(TicError::InvalidArgument(format!("score fidelity {f:?} was not computed")));
            }
            f
        }
        None => *flags.iter().next().expect("diag always computed"),
    };
    let mut report = TicReport {
        bias_exact: bias_exact_value,
        bias_block: bias_block_value,
        bias_diag,
        bias_lower_bound,
        trace_h,
        trace_h_standard_error,
        trace_c,
        trace_f,
        damping_lambda: lambda,
        mean_empirical_loss,
        tic_score: 0.0,
        score_fidelity,
        num_params: d,
        n_train,
        n_matrix: batch.len(),
        fidelity_flags: flags,
    };
    let bias = report.bias(score_fidelity).expect("computed");
    report.tic_score = mean_empirical_loss + bias / n_train.max(1) as f64;
    Ok(report)
}
