//! Task and result envelopes, their wire frames, payload offload to an
//! object store, and the in-process and TCP transports.

pub mod envelope;
pub mod frame;
pub mod payload;
pub mod s3;
pub mod store;
pub mod tcp;
pub mod transport;

use thiserror::Error;

pub use envelope::{FailureReason, ResultEnvelope, TaskEnvelope, TaskStatus};
pub use frame::{decode_frame, encode_frame, read_frame, write_frame, Frame};
pub use payload::{content_key, make_payload, resolve_payload, PayloadRef, DEFAULT_INLINE_THRESHOLD};
pub use s3::{S3Config, S3Store};
pub use store::{FsStore, MemoryStore, ObjectStore, StoreConfig, StoreError};
pub use tcp::{TcpEndpointLink, TcpServer};
pub use transport::{wait_all, EndpointLink, InProcEndpoint, InProcTransport, PendingResult, Transport};

/// Default per-task deadline.
pub const DEFAULT_TIMEOUT_SECS: u64 = 300;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CommError {
    #[error("frame truncated: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("malformed frame header: {0}")]
    MalformedHeader(String),
    #[error("frame length mismatch: {0}")]
    LengthMismatch(String),
    #[error("object {0} is missing from the store")]
    ObjectMissing(String),
    #[error("object {key} failed its integrity check: {detail}")]
    IntegrityFailure { key: String, detail: String },
    #[error("object store unavailable: {0}")]
    StoreUnavailable(String),
    #[error("endpoint {0} is not known to this transport")]
    EndpointUnknown(String),
    #[error("endpoint {0} is unreachable")]
    EndpointUnreachable(String),
    #[error("task {task_id} timed out")]
    Timeout { task_id: String },
    #[error("task id {0} was already dispatched")]
    DuplicateTask(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for CommError {
    fn from(e: std::io::Error) -> Self {
        CommError::Io(e.to_string())
    }
}
