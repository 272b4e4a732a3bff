//! Takeuchi's information criterion for small fully connected networks:
//! network evaluation and derivatives, Hessian/Fisher/gradient-covariance
//! assembly, exact and approximate bias estimators, a momentum SGD trainer,
//! hyperparameter sweeps and Successive Halving with TIC-based pruning.

pub mod dataset;
pub mod error;
pub mod grad;
pub mod harness;
pub mod hpo;
pub mod info;
pub mod linalg;
pub mod nn;
pub mod output;
pub mod seed;
pub mod stats;
pub mod tic;
pub mod train;

pub use dataset::{Example, LabeledDataset, Split, SplitKind};
pub use error::{Result, TicError};
pub use nn::{Activation, NetworkSpec, ParamVector};
pub use tic::{tic_report, Fidelity, TicConfig, TicReport};
pub use train::{train, TrainConfig, TrainStatus};
