//! Experiment orchestration: the federated server loop, baselines, run
//! logs and reports.

mod baselines;
mod config;
mod report;
mod runlog;
mod server;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use baselines::{run_baselines, train_rounds, BaselineReport};
pub use config::{derived_federation, Aggregation, DataConfig, ExperimentConfig, ResolvedFederation};
pub use report::{render_table, summarize_log, RunSummary};
pub use runlog::{kinds, read_run_log, LogRecord, RunLog};
pub use server::{accuracy_of, endpoint_runtime, load_validation, run_federated, run_over_tcp, simulate, Simulation};

use crate::aggregator::RoundSummary;
use crate::codec::CodecError;
use crate::comm::{CommError, StoreError};
use crate::federation::{FederationError, LoaderError};
use crate::taskdata::TaskDataError;
use crate::tensor::ModelState;
use crate::trainer::TrainError;

/// Errors that stop a run before it starts or break the server itself.
/// Failures of endpoints during a run end up in [`RunAbort`] instead.
#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Loader(#[from] LoaderError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Data(#[from] TaskDataError),
}

/// Why a run stopped early.
#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum RunAbort {
    #[error("endpoint {endpoint} is unreachable")]
    EndpointUnreachable { endpoint: String },
    #[error("round {round} timed out waiting for {missing:?}")]
    RoundTimeout { round: u32, missing: Vec<String> },
    #[error("endpoint {endpoint} failed in round {round}: {detail}")]
    ClientFailed { round: u32, endpoint: String, detail: String },
    #[error("aggregation failed in round {round}: {detail}")]
    Aggregation { round: u32, detail: String },
    #[error("object store: {detail}")]
    Store { detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub transport: String,
    pub roster: Vec<String>,
    pub global_rounds: u32,
    pub rounds: Vec<RoundSummary>,
    /// Object-store key of the encoded final trainable state.
    pub final_model_key: Option<String>,
    pub final_model_sha256: Option<String>,
    /// Endpoints that confirmed receipt of the final model.
    pub distributed_to: Vec<String>,
    /// Final model accuracy on each client's own shard.
    pub client_accuracies: BTreeMap<String, f64>,
    /// Final model accuracy on the shared validation split.
    pub val_accuracy: Option<f64>,
    pub aborted: Option<RunAbort>,
    #[serde(skip)]
    pub final_state: Option<ModelState>,
}

impl RunReport {
    fn new(config: &ExperimentConfig, fed: &ResolvedFederation, transport: &str) -> Self {
        Self {
            name: config.name.clone(),
            transport: transport.to_string(),
            roster: fed.roster.clone(),
            global_rounds: config.global_rounds,
            rounds: Vec::new(),
            final_model_key: None,
            final_model_sha256: None,
            distributed_to: Vec::new(),
            client_accuracies: BTreeMap::new(),
            val_accuracy: None,
            aborted: None,
            final_state: None,
        }
    }

    pub fn is_aborted(&self) -> bool {
        self.aborted.is_some()
    }
}
