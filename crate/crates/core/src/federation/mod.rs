//! Federation trust layer: member roster, endpoint records, signed task
//! tokens, dataloader registry and the endpoint service loop.

mod endpoint;
mod loader;
mod manifest;
mod token;

use thiserror::Error;

pub use endpoint::{
    run_endpoint, DataAccess, EndpointConfig, EndpointRuntime, EvalTaskConfig, TaskFn, TaskOutput, TrainTaskConfig,
    CLOCK_SKEW_SECS,
};
pub use loader::{load_dataset, DataloaderRegistry, LoaderError, LoaderSpec, ShardSpec, SourceSpec};
pub use manifest::{
    add_member, create_federation, create_federation_seeded, register_endpoint, register_endpoint_with_rng,
    EndpointRecord, FederationManifest, Member, Role, SigningSecret,
};
pub use token::{issue_token, issue_token_at, sign_claims, unix_now, verify_token, verify_token_at, Claims, RejectReason};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FederationError {
    #[error("{0} is already a member")]
    DuplicateMember(String),
    #[error("{0} is not a member of the federation")]
    NotAMember(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("bad signing secret: {0}")]
    BadSecret(String),
    #[error("io: {0}")]
    Io(String),
}
