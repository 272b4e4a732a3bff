//! Successive Halving over randomly sampled trials, with validation loss, TIC
//! score or an oracle as the rung metric.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledDataset, SplitKind};
use crate::error::{Result, TicError};
use crate::harness::{train_to_budget, HpSpace};
use crate::nn::{mean_loss, NetworkSpec};
use crate::seed::derive_seed;
use crate::tic::{tic_report, Fidelity, TicConfig, TraceSource};
use crate::train::{TrainConfig, TrainState, TrainStatus, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShaMetric {
    ValidationLoss,
    TicScore,
    /// Final validation loss of the trial trained on the full budget.
    Oracle,
}

impl ShaMetric {
    pub fn key(self) -> &'static str {
        match self {
            ShaMetric::ValidationLoss => "validation_loss",
            ShaMetric::TicScore => "tic_score",
            ShaMetric::Oracle => "oracle",
        }
    }
}

/// TIC settings used at rungs: lower-bound score only.
pub fn default_rung_tic() -> TicConfig {
    TicConfig {
        fidelities: vec![Fidelity::LowerBound],
        score_fidelity: Some(Fidelity::LowerBound),
        ..TicConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShaConfig {
    pub num_trials: usize,
    #[serde(default = "default_reduction")]
    pub reduction_factor: usize,
    pub min_resource: usize,
    #[serde(default = "default_rungs")]
    pub num_rungs: usize,
    pub metric: ShaMetric,
    #[serde(default = "default_rung_tic")]
    pub tic: TicConfig,
}

fn default_reduction() -> usize {
    3
}

fn default_rungs() -> usize {
    4
}

impl ShaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TicError::InvalidArgument(m));
        if self.num_trials < 2 {
            return bad(format!("num_trials must be >= 2, got {}", self.num_trials));
        }
        if self.reduction_factor < 2 {
            return bad(format!("reduction_factor must be >= 2, got {}", self.reduction_factor));
        }
        if self.min_resource == 0 {
            return bad("min_resource must be positive".into());
        }
        if self.num_rungs == 0 {
            return bad("num_rungs must be >= 1".into());
        }
        let top = (self.reduction_factor as u128).checked_pow(self.num_rungs as u32 - 1);
        match top {
            Some(t) if (self.num_trials as u128) >= t => {}
            _ => {
                return bad(format!(
                    "num_trials {} must be >= reduction_factor^(num_rungs - 1)",
                    self.num_trials
                ))
            }
        }
        if self.max_resource().is_none() {
            return bad("resource schedule overflows".into());
        }
        Ok(())
    }

    /// Steps allotted at rung `r`.
    pub fn resource(&self, rung: usize) -> Option<usize> {
        self.reduction_factor
            .checked_pow(rung as u32)
            .and_then(|f| f.checked_mul(self.min_resource))
    }

    pub fn max_resource(&self) -> Option<usize> {
        self.resource(self.num_rungs - 1)
    }

    /// Trials trained at each rung, followed by the single winner.
    pub fn survivor_counts(&self) -> Vec<usize> {
        let mut counts = vec![self.num_trials];
        for _ in 0..self.num_rungs {
            let last = *counts.last().unwrap_or(&1);
            counts.push(last.div_ceil(self.reduction_factor));
        }
        counts.truncate(self.num_rungs);
        counts.push(1);
        counts
    }

    /// Total training steps when no trial diverges.
    pub fn closed_form_steps(&self) -> usize {
        let counts = self.survivor_counts();
        let mut prev = 0;
        let mut total = 0;
        for r in 0..self.num_rungs {
            let res = self.resource(r).unwrap_or(0);
            total += counts[r] * (res - prev);
            prev = res;
        }
        total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RungMetric {
    pub rung: usize,
    pub resource: usize,
    /// `None` when the trial had diverged.
    pub metric: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum TrialStatus {
    Pruned { rung: usize },
    Completed,
    Diverged { step: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub hyperparameters: TrainConfig,
    pub rung_metrics: Vec<RungMetric>,
    pub status: TrialStatus,
    pub final_validation_loss: Option<f64>,
    pub steps_consumed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShaAction {
    Advance,
    Prune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShaEvent {
    pub rung: usize,
    pub trial_id: usize,
    pub resource: usize,
    pub metric: Option<f64>,
    pub action: ShaAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShaOutcome {
    pub metric: ShaMetric,
    pub records: Vec<TrialRecord>,
    pub winner: usize,
    /// Trials trained at each rung, then the winner count.
    pub survivor_counts: Vec<usize>,
    pub total_steps: usize,
    pub events: Vec<ShaEvent>,
}

impl ShaOutcome {
    /// One JSON object per line.
    pub fn events_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).map_err(|e| TicError::Format(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// One trial's standing at a rung.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RungEntry {
    pub trial_id: usize,
    pub metric: f64,
    pub diverged_at: Option<usize>,
}

/// Finite metrics first (ascending), then non-finite ones, then diverged
/// trials with later divergence first; ties go to the lower trial id.
pub fn rank_order(a: &RungEntry, b: &RungEntry) -> Ordering {
    let class = |e: &RungEntry| match e.diverged_at {
        Some(_) => 2,
        None if e.metric.is_finite() => 0,
        None => 1,
    };
    class(a)
        .cmp(&class(b))
        .then_with(|| match (a.diverged_at, b.diverged_at) {
            (Some(sa), Some(sb)) => sb.cmp(&sa),
            _ if a.metric.is_finite() && b.metric.is_finite() => a.metric.total_cmp(&b.metric),
            _ => Ordering::Equal,
        })
        .then_with(|| a.trial_id.cmp(&b.trial_id))
}

/// Trial ids of the best `keep` entries, in rank order.
pub fn select_survivors(entries: &[RungEntry], keep: usize) -> Vec<usize> {
    let mut sorted = entries.to_vec();
    sorted.sort_by(rank_order);
    sorted.iter().take(keep).map(|e| e.trial_id).collect()
}

/// Trial configurations of a SHA run: the sampled schedule spans the top
/// rung's resource.
pub fn sha_trial_configs(space: &HpSpace, config: &ShaConfig, seed: u64) -> Result<Vec<TrainConfig>> {
    let budget = config
        .max_resource()
        .ok_or_else(|| TicError::InvalidArgument("resource schedule overflows".into()))?;
    Ok((0..config.num_trials)
        .map(|t| {
            let mut hp = space.trial_config(seed, t);
            hp.step_budget = budget;
            hp
        })
        .collect())
}

/// Final validation loss of every trial trained on the whole budget without
/// pruning; `None` marks divergence at the given step.
fn full_training(
    spec: &NetworkSpec,
    dataset: &LabeledDataset,
    configs: &[TrainConfig],
) -> Result<Vec<RungEntry>> {
    configs
        .par_iter()
        .enumerate()
        .map(|(t, hp)| {
            let (params, status) = train_to_budget(spec, dataset, hp)?;
            Ok(match status {
                TrainStatus::Diverged { step } => RungEntry {
                    trial_id: t,
                    metric: f64::NAN,
                    diverged_at: Some(step),
                },
                TrainStatus::Completed => RungEntry {
                    trial_id: t,
                    metric: mean_loss(spec, &params, dataset, SplitKind::Validation)?,
                    diverged_at: None,
                },
            })
        })
        .collect()
}

fn rung_tic_config(config: &ShaConfig, d: usize) -> TicConfig {
    let mut tic = config.tic.clone();
    if d > tic.dense_cap {
        tic.trace_h = TraceSource::Hutchinson;
    }
    tic
}

/// Runs Successive Halving. Surviving trials of a rung train in parallel and
/// resume from their saved optimizer state at the next rung.
pub fn run_sha(
    spec: &NetworkSpec,
    dataset: &LabeledDataset,
    space: &HpSpace,
    config: &ShaConfig,
    seed: u64,
) -> Result<ShaOutcome> {
    config.validate()?;
    space.validate()?;
    let configs = sha_trial_configs(space, config, seed)?;
    let oracle = if config.metric == ShaMetric::Oracle {
        Some(full_training(spec, dataset, &configs)?)
    } else {
        None
    };
    run_sha_with(spec, dataset, &configs, config, oracle.as_deref())
}

fn run_sha_with(
    spec: &NetworkSpec,
    dataset: &LabeledDataset,
    configs: &[TrainConfig],
    config: &ShaConfig,
    oracle: Option<&[RungEntry]>,
) -> Result<ShaOutcome> {
    let n = configs.len();
    if config.metric == ShaMetric::Oracle && oracle.is_none() {
        return Err(TicError::InvalidArgument("oracle metric needs full-training results".into()));
    }
    let tic = rung_tic_config(config, spec.num_params());
    let trainers: Vec<Trainer> = configs
        .iter()
        .map(|hp| Trainer::new(spec, dataset, hp))
        .collect::<Result<_>>()?;
    let mut states: Vec<TrainState> = trainers.iter().map(|t| t.init_state()).collect();
    let mut records: Vec<TrialRecord> = configs
        .iter()
        .enumerate()
        .map(|(t, hp)| TrialRecord {
            trial_id: t,
            hyperparameters: hp.clone(),
            rung_metrics: Vec::new(),
            status: TrialStatus::Completed,
            final_validation_loss: None,
            steps_consumed: 0,
        })
        .collect();
    let mut alive = vec![true; n];
    let mut survivor_counts = Vec::with_capacity(config.num_rungs + 1);
    let mut events = Vec::new();
    let mut winner = 0;

    for rung in 0..config.num_rungs {
        let resource = config.resource(rung).unwrap_or(usize::MAX);
        survivor_counts.push(alive.iter().filter(|&&a| a).count());
        let results: Vec<(usize, usize, Option<f64>, Option<usize>)> = states
            .par_iter_mut()
            .enumerate()
            .filter(|(t, _)| alive[*t])
            .map(|(t, state)| {
                let before = state.step;
                trainers[t].advance(state, resource, None)?;
                let steps = state.step - before;
                if let TrainStatus::Diverged { step } = state.status {
                    return Ok((t, steps, None, Some(step)));
                }
                let metric = match config.metric {
                    ShaMetric::ValidationLoss => mean_loss(spec, &state.params, dataset, SplitKind::Validation)?,
                    ShaMetric::TicScore => tic_report(spec, &state.params, dataset, &tic)?.tic_score,
                    ShaMetric::Oracle => oracle.map_or(f64::NAN, |o| o[t].metric),
                };
                Ok((t, steps, Some(metric), None))
            })
            .collect::<Result<_>>()?;

        let mut entries = Vec::with_capacity(results.len());
        for &(t, steps, metric, diverged_at) in &results {
            let rec = &mut records[t];
            rec.steps_consumed += steps;
            rec.rung_metrics.push(RungMetric { rung, resource, metric });
            if let Some(step) = diverged_at {
                rec.status = TrialStatus::Diverged { step };
            }
            // The oracle ranks by full-training outcomes, divergence included.
            let entry = match (config.metric, oracle) {
                (ShaMetric::Oracle, Some(o)) => RungEntry { trial_id: t, ..o[t] },
                _ => RungEntry {
                    trial_id: t,
                    metric: metric.unwrap_or(f64::NAN),
                    diverged_at,
                },
            };
            entries.push(entry);
        }
        if rung == 0 && results.iter().all(|r| r.3.is_some()) {
            return Err(TicError::AllDiverged(n));
        }

        let keep = entries.len().div_ceil(config.reduction_factor);
        let survivors = select_survivors(&entries, keep);
        let last = rung + 1 == config.num_rungs;
        for &(t, _, metric, _) in &results {
            let advance = survivors.contains(&t);
            events.push(ShaEvent {
                rung,
                trial_id: t,
                resource,
                metric,
                action: if advance { ShaAction::Advance } else { ShaAction::Prune },
            });
            if !advance {
                alive[t] = false;
                if !last && !matches!(records[t].status, TrialStatus::Diverged { .. }) {
                    records[t].status = TrialStatus::Pruned { rung };
                }
            }
        }
        if last {
            winner = survivors[0];
            survivor_counts.push(survivors.len());
        }
    }

    for (t, rec) in records.iter_mut().enumerate() {
        if rec.status == TrialStatus::Completed {
            rec.final_validation_loss = Some(mean_loss(spec, &states[t].params, dataset, SplitKind::Validation)?);
        }
    }
    let total_steps = records.iter().map(|r| r.steps_consumed).sum();
    Ok(ShaOutcome {
        metric: config.metric,
        records,
        winner,
        survivor_counts,
        total_steps,
        events,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatComparison {
    pub repeat: usize,
    pub seed: u64,
    /// True rank (1 = best) of each arm's winner, keyed by metric.
    pub winner_rank: BTreeMap<String, usize>,
    pub winner: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningComparison {
    pub num_trials: usize,
    pub num_repeats: usize,
    pub repeats: Vec<RepeatComparison>,
    /// `histogram[arm][k]` counts repeats whose winner had true rank `k + 1`.
    pub rank_histogram: BTreeMap<String, Vec<usize>>,
}

/// Matched SHA runs under validation loss, TIC score and the oracle, scored
/// against the ranking from full training without pruning.
pub fn compare_pruning(
    spec: &NetworkSpec,
    dataset: &LabeledDataset,
    space: &HpSpace,
    config: &ShaConfig,
    num_repeats: usize,
    seed: u64,
) -> Result<PruningComparison> {
    if num_repeats == 0 {
        return Err(TicError::InvalidArgument("num_repeats must be at least 1".into()));
    }
    config.validate()?;
    space.validate()?;
    let arms = [ShaMetric::ValidationLoss, ShaMetric::TicScore, ShaMetric::Oracle];
    let mut rank_histogram: BTreeMap<String, Vec<usize>> =
        arms.iter().map(|a| (a.key().to_string(), vec![0; config.num_trials])).collect();
    let mut repeats = Vec::with_capacity(num_repeats);
    for repeat in 0..num_repeats {
        let rep_seed = derive_seed(seed, repeat as u64);
        let configs = sha_trial_configs(space, config, rep_seed)?;
        let truth = full_training(spec, dataset, &configs)?;
        let mut order = truth.clone();
        order.sort_by(rank_order);
        let mut true_rank = vec![0; configs.len()];
        for (pos, e) in order.iter().enumerate() {
            true_rank[e.trial_id] = pos + 1;
        }
        let mut winner_rank = BTreeMap::new();
        let mut winner = BTreeMap::new();
        for arm in arms {
            let arm_config = ShaConfig {
                metric: arm,
                ..config.clone()
            };
            let outcome = run_sha_with(spec, dataset, &configs, &arm_config, Some(&truth))?;
            let rank = true_rank[outcome.winner];
            winner_rank.insert(arm.key().to_string(), rank);
            winner.insert(arm.key().to_string(), outcome.winner);
            if let Some(h) = rank_histogram.get_mut(arm.key()) {
                h[rank - 1] += 1;
            }
        }
        repeats.push(RepeatComparison {
            repeat,
            seed: rep_seed,
            winner_rank,
            winner,
        });
    }
    Ok(PruningComparison {
        num_trials: config.num_trials,
        num_repeats,
        repeats,
        rank_histogram,
    })
}
