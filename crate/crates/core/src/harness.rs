//! Experiment plumbing: synthetic datasets, hyperparameter sweeps with TIC
//! estimates per trained model, generalization gaps, and brute-force
//! leave-one-out cross-validation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledDataset, Split, SplitKind};
use crate::error::{Result, TicError};
use crate::nn::{forward, loss, mean_loss, NetworkSpec, ParamVector};
use crate::output::{csv_line, fmt_opt, fmt_real};
use crate::seed::derive_seed;
use crate::stats::{correlations, CorrelationTriple};
use crate::tic::{tic_report, Fidelity, TicConfig, TicReport};
use crate::train::{TrainConfig, TrainStatus, Trainer, DIVERGENCE_THRESHOLD};

/// Gaussian mixture with one unit-variance spherical component per class.
///
/// Class means sit at `separation` times unit directions; the directions are
/// orthonormal when `num_classes <= dim` and independent random otherwise.
/// Labels cycle through the classes; the partition is a seeded 70/15/15
/// train/validation/test split.
pub fn make_blobs(num_classes: usize, dim: usize, n: usize, separation: f64, seed: u64) -> Result<LabeledDataset> {
    if num_classes < 2 || dim == 0 || n < num_classes {
        return Err(TicError::InvalidArgument(format!(
            "blobs need num_classes >= 2, dim >= 1 and n >= num_classes (got {num_classes}, {dim}, {n})"
        )));
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return Err(TicError::InvalidArgument(format!("separation must be finite and >= 0, got {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        if num_classes <= dim {
            for prev in &directions {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        directions.push(v);
    }
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        for &mu in &directions[label] {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(separation * mu + z);
        }
        labels.push(label);
    }
    let split = Split::random(n, 0.7, 0.15, derive_seed(seed, 1));
    LabeledDataset::new(features, dim, labels, num_classes, split)
}

/// `|mean train loss - mean test loss|`.
pub fn generalization_gap(spec: &NetworkSpec, params: &ParamVector, dataset: &LabeledDataset) -> Result<f64> {
    let train = mean_loss(spec, params, dataset, SplitKind::Train)?;
    let test = mean_loss(spec, params, dataset, SplitKind::Test)?;
    Ok((train - test).abs())
}

/// Closed interval for one hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub low: f64,
    pub high: f64,
}

impl ParamRange {
    pub const fn new(low: f64, high: f64) -> Self {
        ParamRange { low, high }
    }

    pub const fn fixed(value: f64) -> Self {
        ParamRange { low: value, high: value }
    }

    fn check(&self, name: &str, log: bool) -> Result<()> {
        if !(self.low <= self.high) || !self.low.is_finite() || !self.high.is_finite() {
            return Err(TicError::InvalidArgument(format!("{name}: invalid range [{}, {}]", self.low, self.high)));
        }
        if log && self.low <= 0.0 && self.low != self.high {
            return Err(TicError::InvalidArgument(format!("{name}: log-uniform range must be positive")));
        }
        Ok(())
    }

    fn sample_linear(&self, rng: &mut impl Rng) -> f64 {
        if self.low == self.high {
            self.low
        } else {
            rng.random_range(self.low..=self.high)
        }
    }

    fn sample_log(&self, rng: &mut impl Rng) -> f64 {
        if self.low == self.high {
            self.low
        } else {
            rng.random_range(self.low.ln()..=self.high.ln()).exp()
        }
    }
}

/// Search space: log-uniform learning rate and weight decay, uniform decay
/// factor, decay timing and momentum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HpSpace {
    pub eta: ParamRange,
    pub rho: ParamRange,
    pub delta: ParamRange,
    pub lambda_wd: ParamRange,
    pub gamma: ParamRange,
    pub batch_size: usize,
    pub step_budget: usize,
}

impl HpSpace {
    /// Ranges used for the small fully connected TinyMNIST-style workloads.
    pub fn small_mlp(batch_size: usize, step_budget: usize) -> Self {
        HpSpace {
            eta: ParamRange::new(1e-4, 1e-1),
            rho: ParamRange::new(0.5, 1.0),
            delta: ParamRange::new(0.5, 1.0),
            lambda_wd: ParamRange::fixed(0.0),
            gamma: ParamRange::new(0.0, 0.999),
            batch_size,
            step_budget,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.eta.check("eta", true)?;
        self.rho.check("rho", false)?;
        self.delta.check("delta", false)?;
        self.lambda_wd.check("lambda_wd", true)?;
        self.gamma.check("gamma", false)?;
        Ok(())
    }

    /// Draws one configuration; the training seed comes from the same stream.
    pub fn sample(&self, rng: &mut impl Rng) -> TrainConfig {
        TrainConfig {
            eta: self.eta.sample_log(rng),
            rho: self.rho.sample_linear(rng),
            delta: self.delta.sample_linear(rng),
            lambda_wd: self.lambda_wd.sample_log(rng),
            gamma: self.gamma.sample_linear(rng),
            batch_size: self.batch_size,
            step_budget: self.step_budget,
            seed: rng.random(),
        }
    }

    /// Configuration of trial `trial_id` under `sweep_seed`.
    pub fn trial_config(&self, sweep_seed: u64, trial_id: usize) -> TrainConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sweep_seed, trial_id as u64));
        self.sample(&mut rng)
    }
}

/// Trains over the whole budget without snapshots and reports the final
/// parameters and status.
pub fn train_to_budget(spec: &NetworkSpec, dataset: &LabeledDataset, config: &TrainConfig) -> Result<(ParamVector, TrainStatus)> {
    let trainer = Trainer::new(spec, dataset, config)?;
    let mut state = trainer.init_state();
    trainer.advance(&mut state, config.step_budget, None)?;
    if !state.diverged() {
        let final_loss = mean_loss(spec, &state.params, dataset, SplitKind::Train)?;
        if !final_loss.is_finite() || final_loss > DIVERGENCE_THRESHOLD {
            state.status = TrainStatus::Diverged { step: state.step };
        }
    }
    Ok((state.params, state.status))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub trial_id: usize,
    pub hyperparameters: TrainConfig,
    pub diverged: bool,
    pub d_over_n: f64,
    pub train_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub gen_gap: Option<f64>,
    pub tic_report: Option<TicReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

/// One trial: sample, train, then measure the gap and TIC on the final
/// parameters.
pub fn run_trial(
    spec: &NetworkSpec,
    dataset: &LabeledDataset,
    space: &HpSpace,
    tic_config: &TicConfig,
    sweep_seed: u64,
    trial_id: usize,
) -> Result<SweepRow> {
    let hp = space.trial_config(sweep_seed, trial_id);
    let d_over_n = spec.num_params() as f64 / dataset.indices(SplitKind::Train).len() as f64;
    let (params, status) = train_to_budget(spec, dataset, &hp)?;
    if let TrainStatus::Diverged { .. } = status {
        return Ok(SweepRow {
            trial_id,
            hyperparameters: hp,
            diverged: true,
            d_over_n,
            train_loss: None,
            test_loss: None,
            gen_gap: None,
            tic_report: None,
        });
    }
    let train_loss = mean_loss(spec, &params, dataset, SplitKind::Train)?;
    let test_loss = mean_loss(spec, &params, dataset, SplitKind::Test)?;
    let report = tic_report(spec, &params, dataset, tic_config)?;
    Ok(SweepRow {
        trial_id,
        hyperparameters: hp,
        diverged: false,
        d_over_n,
        train_loss: Some(train_loss),
        test_loss: Some(test_loss),
        gen_gap: Some((train_loss - test_loss).abs()),
        tic_report: Some(report),
    })
}

/// Random-search sweep. Trials run in parallel; rows are ordered by trial id.
pub fn run_sweep(
    spec: &NetworkSpec,
    dataset: &LabeledDataset,
    space: &HpSpace,
    num_trials: usize,
    tic_config: &TicConfig,
    seed: u64,
) -> Result<SweepResult> {
    if num_trials == 0 {
        return Err(TicError::InvalidArgument("num_trials must be at least 1".into()));
    }
    spec.validate()?;
    space.validate()?;
    let rows: Vec<SweepRow> = (0..num_trials)
        .into_par_iter()
        .map(|t| run_trial(spec, dataset, space, tic_config, seed, t))
        .collect::<Result<_>>()?;
    if rows.iter().all(|r| r.diverged) {
        return Err(TicError::AllDiverged(num_trials));
    }
    Ok(SweepResult { rows })
}

/// Correlations of each bias estimate (and the TIC score) with the gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub n_trials: usize,
    pub n_valid: usize,
    pub n_diverged: usize,
    pub d_over_n: f64,
    pub correlations: BTreeMap<String, CorrelationTriple>,
    pub warnings: Vec<String>,
}

pub fn fidelity_key(f: Fidelity) -> &'static str {
    match f {
        Fidelity::Exact => "exact",
        Fidelity::Block => "block",
        Fidelity::Diag => "diag",
        Fidelity::LowerBound => "lower_bound",
    }
}

impl SweepResult {
    pub fn valid_rows(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| !r.diverged)
    }

    /// `(estimate, gen_gap)` pairs of non-diverged trials for one fidelity.
    pub fn pairs(&self, fidelity: Fidelity) -> (Vec<f64>, Vec<f64>) {
        self.valid_rows()
            .filter_map(|r| {
                let report = r.tic_report.as_ref()?;
                Some((report.bias(fidelity)?, r.gen_gap?))
            })
            .unzip()
    }

    pub fn correlation(&self, fidelity: Fidelity) -> Result<CorrelationTriple> {
        let (xs, ys) = self.pairs(fidelity);
        correlations(&xs, &ys)
    }

    pub fn summary(&self) -> CorrelationSummary {
        let n_valid = self.valid_rows().count();
        let mut summary = CorrelationSummary {
            n_trials: self.rows.len(),
            n_valid,
            n_diverged: self.rows.len() - n_valid,
            d_over_n: self.rows.first().map_or(f64::NAN, |r| r.d_over_n),
            correlations: BTreeMap::new(),
            warnings: Vec::new(),
        };
        if n_valid < 3 {
            summary
                .warnings
                .push(format!("only {n_valid} non-diverged trials; correlations need at least 3"));
            return summary;
        }
        for f in [Fidelity::Exact, Fidelity::Block, Fidelity::Diag, Fidelity::LowerBound] {
            let (xs, ys) = self.pairs(f);
            if xs.is_empty() {
                continue;
            }
            match correlations(&xs, &ys) {
                Ok(c) => {
                    summary.correlations.insert(fidelity_key(f).to_string(), c);
                }
                Err(e) => summary.warnings.push(format!("{}: {e}", fidelity_key(f))),
            }
        }
        let (xs, ys): (Vec<f64>, Vec<f64>) = self
            .valid_rows()
            .filter_map(|r| Some((r.tic_report.as_ref()?.tic_score, r.gen_gap?)))
            .unzip();
        match correlations(&xs, &ys) {
            Ok(c) => {
                summary.correlations.insert("tic_score".to_string(), c);
            }
            Err(e) => summary.warnings.push(format!("tic_score: {e}")),
        }
        summary
    }

    pub const CSV_HEADER: [&'static str; 25] = [
        "trial_id",
        "eta",
        "rho",
        "delta",
        "lambda_wd",
        "gamma",
        "batch_size",
        "step_budget",
        "seed",
        "diverged",
        "d_over_n",
        "train_loss",
        "test_loss",
        "gen_gap",
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
    ];

    pub fn to_csv(&self) -> String {
        let mut out = csv_line(Self::CSV_HEADER);
        for r in &self.rows {
            let hp = &r.hyperparameters;
            let t = r.tic_report.as_ref();
            out.push_str(&csv_line([
                r.trial_id.to_string(),
                fmt_real(hp.eta),
                fmt_real(hp.rho),
                fmt_real(hp.delta),
                fmt_real(hp.lambda_wd),
                fmt_real(hp.gamma),
                hp.batch_size.to_string(),
                hp.step_budget.to_string(),
                hp.seed.to_string(),
                r.diverged.to_string(),
                fmt_real(r.d_over_n),
                fmt_opt(r.train_loss),
                fmt_opt(r.test_loss),
                fmt_opt(r.gen_gap),
                fmt_opt(t.and_then(|t| t.bias_exact)),
                fmt_opt(t.and_then(|t| t.bias_block)),
                fmt_opt(t.map(|t| t.bias_diag)),
                fmt_opt(t.map(|t| t.bias_lower_bound)),
                fmt_opt(t.map(|t| t.trace_h)),
                fmt_opt(t.and_then(|t| t.trace_h_standard_error)),
                fmt_opt(t.map(|t| t.trace_c)),
                fmt_opt(t.map(|t| t.trace_f)),
                fmt_opt(t.map(|t| t.damping_lambda)),
                fmt_opt(t.map(|t| t.mean_empirical_loss)),
                fmt_opt(t.map(|t| t.tic_score)),
            ]));
        }
        out
    }
}

/// Upper bound on the training split for brute-force LOOCV.
pub const LOOCV_MAX_TRAIN: usize = 200;

/// Brute-force leave-one-out estimate of the expected loss.
///
/// Each fold retrains from the same initialization and shuffle seed on the
/// training split minus one point and scores the held-out point. A batch size
/// covering the whole training split stays full-batch in every fold.
pub fn loocv_estimate(spec: &NetworkSpec, dataset: &LabeledDataset, config: &TrainConfig) -> Result<f64> {
    let train = dataset.indices(SplitKind::Train).to_vec();
    let n = train.len();
    if n > LOOCV_MAX_TRAIN {
        return Err(TicError::CapExceeded {
            dim: n,
            cap: LOOCV_MAX_TRAIN,
        });
    }
    if n < 2 {
        return Err(TicError::InvalidArgument("LOOCV needs at least 2 training points".into()));
    }
    let mut fold_config = config.clone();
    if fold_config.batch_size >= n {
        fold_config.batch_size = n - 1;
    }
    let losses: Vec<f64> = train
        .par_iter()
        .map(|&i| {
            let fold = dataset.hold_out(i)?;
            let (params, status) = train_to_budget(spec, &fold, &fold_config)?;
            if let TrainStatus::Diverged { step } = status {
                return Err(TicError::InvalidArgument(format!("LOOCV fold {i} diverged at step {step}")));
            }
            let ex = dataset.example(i);
            loss(&forward(spec, &params, ex.x)?, ex.label)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / n as f64)
}
