//! Mini-batch SGD with heavy-ball momentum, coupled weight decay and a single
//! step learning-rate decay.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledDataset, SplitKind};
use crate::error::{Result, TicError};
use crate::grad::batch_loss_and_grad;
use crate::nn::{batch_mean_loss, NetworkSpec, ParamVector};
use crate::seed::derive_seed;

/// Losses above this (or non-finite) mark a run as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Learning rate.
    pub eta: f64,
    /// Decay factor applied once.
    pub rho: f64,
    /// Fraction of the step budget after which the decay applies.
    pub delta: f64,
    /// Weight decay coefficient.
    pub lambda_wd: f64,
    /// Momentum.
    pub gamma: f64,
    pub batch_size: usize,
    pub step_budget: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TicError::InvalidArgument(msg));
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return bad(format!("eta must be finite and >= 0, got {}", self.eta));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho must lie in (0, 1], got {}", self.rho));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad(format!("delta must lie in (0, 1], got {}", self.delta));
        }
        if !(self.lambda_wd >= 0.0) || !self.lambda_wd.is_finite() {
            return bad(format!("lambda_wd must be finite and >= 0, got {}", self.lambda_wd));
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.step_budget == 0 {
            return bad("step_budget must be positive".into());
        }
        Ok(())
    }

    /// Index of the first step that uses the decayed rate.
    pub fn decay_step(&self) -> usize {
        (self.delta * self.step_budget as f64).floor() as usize
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        if step < self.decay_step() {
            self.eta
        } else {
            self.eta * self.rho
        }
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, 1)
    }

    pub fn shuffle_seed(&self) -> u64 {
        derive_seed(self.seed, 2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub epoch: usize,
    pub params: ParamVector,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum TrainStatus {
    Completed,
    Diverged { step: usize },
}

/// Everything needed to resume training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamVector,
    pub velocity: Vec<f64>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pub step: usize,
    pub epoch: usize,
    pub status: TrainStatus,
}

impl TrainState {
    pub fn diverged(&self) -> bool {
        matches!(self.status, TrainStatus::Diverged { .. })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamVector,
    pub snapshots: Vec<Snapshot>,
    pub status: TrainStatus,
    pub steps_run: usize,
}

/// Binds a network, dataset and config for one training run.
#[derive(Debug, Clone, Copy)]
pub struct Trainer<'a> {
    spec: &'a NetworkSpec,
    dataset: &'a LabeledDataset,
    config: &'a TrainConfig,
}

impl<'a> Trainer<'a> {
    pub fn new(spec: &'a NetworkSpec, dataset: &'a LabeledDataset, config: &'a TrainConfig) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        let n_train = dataset.indices(SplitKind::Train).len();
        if n_train == 0 {
            return Err(TicError::Empty("training split"));
        }
        if config.batch_size > n_train {
            return Err(TicError::InvalidArgument(format!(
                "batch_size {} exceeds training split size {n_train}",
                config.batch_size
            )));
        }
        if dataset.dim() != spec.input_dim {
            return Err(TicError::DimensionMismatch {
                what: "dataset feature dimension",
                expected: spec.input_dim,
                actual: dataset.dim(),
            });
        }
        if dataset.num_classes() > spec.num_classes {
            return Err(TicError::DimensionMismatch {
                what: "dataset class count",
                expected: spec.num_classes,
                actual: dataset.num_classes(),
            });
        }
        Ok(Trainer { spec, dataset, config })
    }

    pub fn init_state(&self) -> TrainState {
        self.state_from(ParamVector::init(self.spec, self.config.init_seed()))
    }

    /// Fresh optimizer state starting from the given parameters.
    pub fn state_from(&self, params: ParamVector) -> TrainState {
        let d = params.len();
        TrainState {
            params,
            velocity: vec![0.0; d],
            rng: ChaCha8Rng::seed_from_u64(self.config.shuffle_seed()),
            order: Vec::new(),
            cursor: 0,
            step: 0,
            epoch: 0,
            status: TrainStatus::Completed,
        }
    }

    fn snapshot(&self, state: &TrainState) -> Result<Snapshot> {
        let train = self.dataset.examples(SplitKind::Train);
        let val = self.dataset.examples(SplitKind::Validation);
        let train_loss = batch_mean_loss(self.spec, &state.params, &train)?;
        let validation_loss = if val.is_empty() {
            f64::NAN
        } else {
            batch_mean_loss(self.spec, &state.params, &val)?
        };
        Ok(Snapshot {
            step: state.step,
            epoch: state.epoch,
            params: state.params.clone(),
            train_loss,
            validation_loss,
        })
    }

    fn epoch_exhausted(&self, state: &TrainState) -> bool {
        state.order.is_empty() || state.cursor + self.config.batch_size > state.order.len()
    }

    /// Runs steps until `state.step == until` or divergence. Snapshots are
    /// pushed at epoch boundaries when `snapshots` is given.
    pub fn advance(&self, state: &mut TrainState, until: usize, mut snapshots: Option<&mut Vec<Snapshot>>) -> Result<()> {
        let train_indices = self.dataset.indices(SplitKind::Train);
        while state.step < until && !state.diverged() {
            if self.epoch_exhausted(state) {
                state.order = train_indices.to_vec();
                state.order.shuffle(&mut state.rng);
                state.cursor = 0;
            }
            let batch_idx = &state.order[state.cursor..state.cursor + self.config.batch_size];
            let batch = self.dataset.gather(batch_idx);
            let (loss, g) = batch_loss_and_grad(self.spec, &state.params, &batch)?;
            if !loss.is_finite() || loss > DIVERGENCE_THRESHOLD || g.iter().any(|v| !v.is_finite()) {
                state.status = TrainStatus::Diverged { step: state.step };
                break;
            }
            let lr = self.config.learning_rate(state.step);
            let (gamma, wd) = (self.config.gamma, self.config.lambda_wd);
            for ((theta, v), gi) in state.params.values_mut().iter_mut().zip(state.velocity.iter_mut()).zip(&g) {
                *v = gamma * *v - lr * (gi + wd * *theta);
                *theta += *v;
            }
            state.cursor += self.config.batch_size;
            state.step += 1;
            if self.epoch_exhausted(state) {
                state.epoch += 1;
                if let Some(out) = snapshots.as_deref_mut() {
                    let snap = self.snapshot(state)?;
                    if !snap.train_loss.is_finite() || snap.train_loss > DIVERGENCE_THRESHOLD {
                        state.status = TrainStatus::Diverged { step: state.step };
                        break;
                    }
                    out.push(snap);
                }
            }
        }
        Ok(())
    }

    /// Full run over the step budget with snapshots at step 0, every epoch
    /// boundary and the final step.
    pub fn run(&self) -> Result<TrainOutcome> {
        self.run_from(self.init_state())
    }

    pub fn run_from(&self, mut state: TrainState) -> Result<TrainOutcome> {
        let mut snapshots = vec![self.snapshot(&state)?];
        self.advance(&mut state, self.config.step_budget, Some(&mut snapshots))?;
        if !state.diverged() && snapshots.last().map(|s| s.step) != Some(state.step) {
            let snap = self.snapshot(&state)?;
            if snap.train_loss.is_finite() && snap.train_loss <= DIVERGENCE_THRESHOLD {
                snapshots.push(snap);
            } else {
                state.status = TrainStatus::Diverged { step: state.step };
            }
        }
        Ok(TrainOutcome {
            params: state.params,
            snapshots,
            status: state.status,
            steps_run: state.step,
        })
    }
}

/// Trains `spec` on the training split of `dataset`.
pub fn train(spec: &NetworkSpec, dataset: &LabeledDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(spec, dataset, config)?.run()
}
