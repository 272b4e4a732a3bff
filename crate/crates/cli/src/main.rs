//! `tic`: train networks, estimate TIC, run correlation sweeps, Successive
//! Halving and NTK drift diagnostics from JSON configs.

mod config;
mod exit;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use tic_core::harness::run_sweep;
use tic_core::hpo::{compare_pruning, run_sha};
use tic_core::info::ntk_gram;
use tic_core::output::{csv_line, fmt_real};
use tic_core::train::Snapshot;
use tic_core::{tic_report, train, ParamVector, SplitKind, TrainStatus};

use config::{read_config, CorrelateRun, HpoRun, NtkDriftRun, TicRun, TrainRun};
use exit::CliError;

#[derive(Parser)]
#[command(name = "tic", version, about = "Takeuchi's information criterion for small neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Io {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; must be absent or empty.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes snapshots.csv, params.json and status.json.
    Train(Io),
    /// Estimate TIC for saved parameters; writes tic_report.json.
    Tic {
        #[command(flatten)]
        io: Io,
        /// Parameter file (overrides `params` in the config).
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Hyperparameter sweep; writes sweep.csv and correlations.json.
    Correlate(Io),
    /// Successive Halving; writes events.jsonl and summary.json.
    Hpo(Io),
    /// Empirical NTK drift along training; writes drift.csv.
    NtkDrift(Io),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train(io) => cmd_train(&io),
        Command::Tic { io, params } => cmd_tic(&io, params),
        Command::Correlate(io) => cmd_correlate(&io),
        Command::Hpo(io) => cmd_hpo(&io),
        Command::NtkDrift(io) => cmd_ntk_drift(&io),
    }
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| CliError::config(format!("{}: {e}", dir.display())))?
            .next()
            .is_some();
        if non_empty {
            return Err(CliError::config(format!(
                "output directory {} exists and is not empty",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Parses the config, prepares the output directory and echoes the resolved
/// config into it.
fn start<T: serde::de::DeserializeOwned + Serialize>(io: &Io) -> Result<T, CliError> {
    let cfg: T = read_config(&io.config)?;
    prepare_out(&io.out)?;
    write_json(&io.out.join("config.json"), &cfg)?;
    Ok(cfg)
}

fn snapshots_csv(snapshots: &[Snapshot]) -> String {
    let mut out = csv_line(["trial_id", "step", "epoch", "train_loss", "validation_loss"]);
    for s in snapshots {
        out.push_str(&csv_line([
            "0".to_string(),
            s.step.to_string(),
            s.epoch.to_string(),
            fmt_real(s.train_loss),
            fmt_real(s.validation_loss),
        ]));
    }
    out
}

fn diverged(status: TrainStatus) -> Result<(), CliError> {
    match status {
        TrainStatus::Completed => Ok(()),
        TrainStatus::Diverged { step } => Err(CliError {
            code: exit::DIVERGED,
            message: format!("training diverged at step {step}; partial output written"),
        }),
    }
}

fn cmd_train(io: &Io) -> Result<(), CliError> {
    let cfg: TrainRun = start(io)?;
    let dataset = cfg.dataset.load()?;
    let outcome = train(&cfg.network, &dataset, &cfg.train)?;
    fs::write(io.out.join("snapshots.csv"), snapshots_csv(&outcome.snapshots))?;
    write_json(&io.out.join("params.json"), &outcome.params)?;
    write_json(&io.out.join("status.json"), &outcome.status)?;
    diverged(outcome.status)
}

fn cmd_tic(io: &Io, params_override: Option<PathBuf>) -> Result<(), CliError> {
    let mut cfg: TicRun = read_config(&io.config)?;
    if params_override.is_some() {
        cfg.params = params_override;
    }
    let params_path = cfg
        .params
        .clone()
        .ok_or_else(|| CliError::config("no parameter file given (config `params` or --params)"))?;
    let params: ParamVector = read_config(&params_path)?;
    prepare_out(&io.out)?;
    write_json(&io.out.join("config.json"), &cfg)?;
    let dataset = cfg.dataset.load()?;
    let report = tic_report(&cfg.network, &params, &dataset, &cfg.tic)?;
    write_json(&io.out.join("tic_report.json"), &report)
}

fn cmd_correlate(io: &Io) -> Result<(), CliError> {
    let cfg: CorrelateRun = start(io)?;
    let dataset = cfg.dataset.load()?;
    let sweep = run_sweep(&cfg.network, &dataset, &cfg.space, cfg.num_trials, &cfg.tic, cfg.seed)?;
    fs::write(io.out.join("sweep.csv"), sweep.to_csv())?;
    write_json(&io.out.join("correlations.json"), &sweep.summary())
}

#[derive(Serialize)]
struct HpoSummary<'a> {
    metric: &'static str,
    winner: usize,
    survivor_counts: &'a [usize],
    total_steps: usize,
    closed_form_steps: usize,
    records: &'a [tic_core::hpo::TrialRecord],
}

fn cmd_hpo(io: &Io) -> Result<(), CliError> {
    let cfg: HpoRun = start(io)?;
    let dataset = cfg.dataset.load()?;
    let outcome = run_sha(&cfg.network, &dataset, &cfg.space, &cfg.sha, cfg.seed)?;
    fs::write(io.out.join("events.jsonl"), outcome.events_jsonl()?)?;
    write_json(
        &io.out.join("summary.json"),
        &HpoSummary {
            metric: outcome.metric.key(),
            winner: outcome.winner,
            survivor_counts: &outcome.survivor_counts,
            total_steps: outcome.total_steps,
            closed_form_steps: cfg.sha.closed_form_steps(),
            records: &outcome.records,
        },
    )?;
    if let Some(repeats) = cfg.compare_repeats {
        let comparison = compare_pruning(&cfg.network, &dataset, &cfg.space, &cfg.sha, repeats, cfg.seed)?;
        write_json(&io.out.join("comparison.json"), &comparison)?;
    }
    Ok(())
}

fn cmd_ntk_drift(io: &Io) -> Result<(), CliError> {
    let cfg: NtkDriftRun = start(io)?;
    let dataset = cfg.dataset.load()?;
    let train_idx = dataset.indices(SplitKind::Train);
    if cfg.probe_size == 0 || cfg.probe_size > train_idx.len() {
        return Err(CliError::config(format!(
            "probe_size must lie in 1..={}, got {}",
            train_idx.len(),
            cfg.probe_size
        )));
    }
    let probe: Vec<&[f64]> = train_idx[..cfg.probe_size].iter().map(|&i| dataset.row(i)).collect();
    let outcome = train(&cfg.network, &dataset, &cfg.train)?;
    let mut csv = csv_line(["step", "relative_drift"]);
    let mut reference = None;
    for s in &outcome.snapshots {
        let gram = ntk_gram(&cfg.network, &s.params, &probe)?;
        let reference = reference.get_or_insert_with(|| gram.clone());
        csv.push_str(&csv_line([s.step.to_string(), fmt_real(gram.relative_drift(reference))]));
    }
    fs::write(io.out.join("drift.csv"), csv)?;
    diverged(outcome.status)
}
