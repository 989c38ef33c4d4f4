use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::payload::PayloadRef;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEnvelope {
    pub task_id: String,
    pub function: String,
    pub round: u32,
    pub config: Value,
    pub payload: PayloadRef,
    pub auth_token: String,
    pub sender: String,
}

impl TaskEnvelope {
    /// A task with a fresh random id and empty inline payload.
    pub fn new(function: impl Into<String>, round: u32, sender: impl Into<String>) -> Self {
        Self {
            task_id: uuid::Uuid::new_v4().to_string(),
            function: function.into(),
            round,
            config: Value::Object(Default::default()),
            payload: PayloadRef::empty(),
            auth_token: String::new(),
            sender: sender.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum FailureReason {
    AuthRejected(String),
    UnknownFunction(String),
    DataloaderError(String),
    ExecutionError(String),
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureReason::AuthRejected(m) => write!(f, "auth rejected: {m}"),
            FailureReason::UnknownFunction(m) => write!(f, "unknown function {m}"),
            FailureReason::DataloaderError(m) => write!(f, "dataloader error: {m}"),
            FailureReason::ExecutionError(m) => write!(f, "execution error: {m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum TaskStatus {
    Ok,
    Failed { reason: FailureReason },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultEnvelope {
    pub task_id: String,
    pub client_id: String,
    pub status: TaskStatus,
    pub payload: PayloadRef,
    pub metrics: Value,
}

impl ResultEnvelope {
    pub fn ok(task_id: impl Into<String>, client_id: impl Into<String>, payload: PayloadRef, metrics: Value) -> Self {
        Self {
            task_id: task_id.into(),
            client_id: client_id.into(),
            status: TaskStatus::Ok,
            payload,
            metrics,
        }
    }

    pub fn failed(task_id: impl Into<String>, client_id: impl Into<String>, reason: FailureReason) -> Self {
        Self {
            task_id: task_id.into(),
            client_id: client_id.into(),
            status: TaskStatus::Failed { reason },
            payload: PayloadRef::empty(),
            metrics: Value::Object(Default::default()),
        }
    }

    pub fn failure(&self) -> Option<&FailureReason> {
        match &self.status {
            TaskStatus::Ok => None,
            TaskStatus::Failed { reason } => Some(reason),
        }
    }
}
