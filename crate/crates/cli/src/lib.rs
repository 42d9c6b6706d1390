//! Experiment harness: configuration, training, evaluation, sweeps and the
//! estimator lab behind the `pdisvae` binary.

pub mod config;
pub mod eval;
pub mod lab;
pub mod sweep;
pub mod train;

pub use config::{parse_config, ExperimentConfig, ModelKind, RawConfig};
pub use eval::{read_metrics, run_eval, MetricsReport};
pub use train::{run_training, RunArtifacts};
