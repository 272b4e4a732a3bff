//! JSON run configurations, one per subcommand.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tic_core::dataset::load_idx_dataset;
use tic_core::harness::{make_blobs, HpSpace};
use tic_core::hpo::ShaConfig;
use tic_core::{LabeledDataset, NetworkSpec, TicConfig, TrainConfig};

use crate::exit::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Synthetic Gaussian blobs.
    Blobs {
        num_classes: usize,
        dim: usize,
        n: usize,
        separation: f64,
        seed: u64,
    },
    /// IDX image/label pair, average-pooled by `pool_factor`.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default = "one")]
        pool_factor: usize,
        #[serde(default)]
        limit: Option<usize>,
        split_seed: u64,
    },
}

fn one() -> usize {
    1
}

impl DatasetSource {
    pub fn load(&self) -> Result<LabeledDataset, CliError> {
        match self {
            DatasetSource::Blobs {
                num_classes,
                dim,
                n,
                separation,
                seed,
            } => Ok(make_blobs(*num_classes, *dim, *n, *separation, *seed)?),
            DatasetSource::Idx {
                images,
                labels,
                pool_factor,
                limit,
                split_seed,
            } => {
                let open = |p: &Path| {
                    File::open(p)
                        .map(BufReader::new)
                        .map_err(|e| CliError::config(format!("{}: {e}", p.display())))
                };
                Ok(load_idx_dataset(open(images)?, open(labels)?, *pool_factor, *limit, *split_seed)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub network: NetworkSpec,
    pub dataset: DatasetSource,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TicRun {
    pub network: NetworkSpec,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub tic: TicConfig,
    /// Parameter file written by `train`; `--params` overrides it.
    #[serde(default)]
    pub params: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelateRun {
    pub network: NetworkSpec,
    pub dataset: DatasetSource,
    pub space: HpSpace,
    pub num_trials: usize,
    #[serde(default)]
    pub tic: TicConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HpoRun {
    pub network: NetworkSpec,
    pub dataset: DatasetSource,
    pub space: HpSpace,
    pub sha: ShaConfig,
    pub seed: u64,
    /// When set, also runs the matched metric comparison this many times.
    #[serde(default)]
    pub compare_repeats: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NtkDriftRun {
    pub network: NetworkSpec,
    pub dataset: DatasetSource,
    pub train: TrainConfig,
    /// The first `probe_size` training examples form the probe batch.
    pub probe_size: usize,
}

/// Parses a config file, reporting the JSON path of the first bad field.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let file = File::open(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let mut de = serde_json::Deserializer::from_reader(BufReader::new(file));
    serde_path_to_error::deserialize(&mut de)
        .map_err(|e| CliError::config(format!("{}: at `{}`: {}", path.display(), e.path(), e.inner())))
}
