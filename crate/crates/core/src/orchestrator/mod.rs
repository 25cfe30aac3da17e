//! Round loop, leave-one-domain-out evaluation, configuration and reports.

pub mod config;
pub mod evaluate;
pub mod federation;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::{ConfigError, ExperimentConfig, Topology};
pub use evaluate::{
    csv_table, generate_dataset, leave_one_out, leave_one_out_multi, method_name, train_federation,
    Dataset, FoldOutcome, LooReport, RunOptions,
};
pub use federation::{client_rng, init_seed, Client, Federation, RoundLog};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("leave-one-out needs at least 3 domains, got {0}")]
    TooFewDomains(usize),
    #[error("federation has no clients")]
    NoClients,
    #[error("duplicate client id")]
    DuplicateClient,
    #[error("client `{0}` has no data")]
    EmptyClient(String),
    #[error(transparent)]
    Param(#[from] crate::params::ParamError),
    #[error(transparent)]
    Tree(#[from] crate::tree::TreeError),
    #[error(transparent)]
    Style(#[from] crate::fedstyle::StyleError),
    #[error(transparent)]
    Fusion(#[from] crate::fusion::FusionError),
    #[error(transparent)]
    Inference(#[from] crate::inference::InferenceError),
    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl OrchestratorError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
