//! Server-side dispatch and the endpoint-side receive/reply link, plus the
//! in-process transport (threads and channels, same wire frames as TCP).

use std::collections::{HashMap, HashSet};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use super::envelope::{ResultEnvelope, TaskEnvelope};
use super::frame::{decode_frame, encode_frame, Frame};
use super::CommError;

pub(crate) type ResultSender = Sender<Result<ResultEnvelope, CommError>>;

/// Delivers tasks to endpoints and hands back a handle for each result.
pub trait Transport: Send + Sync {
    fn dispatch(&self, endpoint_id: &str, task: TaskEnvelope) -> Result<PendingResult, CommError>;
    fn name(&self) -> &'static str;
}

/// The endpoint's side of a transport.
pub trait EndpointLink: Send {
    fn endpoint_id(&self) -> &str;
    /// Next task, or `None` once the server side has gone away.
    fn recv(&mut self) -> Result<Option<TaskEnvelope>, CommError>;
    fn send(&mut self, result: ResultEnvelope) -> Result<(), CommError>;
}

/// A dispatched task's eventual result.
#[derive(Debug)]
pub struct PendingResult {
    task_id: String,
    endpoint_id: String,
    rx: Receiver<Result<ResultEnvelope, CommError>>,
}

impl PendingResult {
    pub(crate) fn new(task_id: String, endpoint_id: String) -> (Self, ResultSender) {
        let (tx, rx) = mpsc::channel();
        (
            Self {
                task_id,
                endpoint_id,
                rx,
            },
            tx,
        )
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn endpoint_id(&self) -> &str {
        &self.endpoint_id
    }

    pub fn wait(&self, timeout: Duration) -> Result<ResultEnvelope, CommError> {
        match self.rx.recv_timeout(timeout) {
            Ok(r) => r,
            Err(RecvTimeoutError::Timeout) => Err(CommError::Timeout {
                task_id: self.task_id.clone(),
            }),
            Err(RecvTimeoutError::Disconnected) => Err(CommError::EndpointUnreachable(self.endpoint_id.clone())),
        }
    }

    pub fn wait_until(&self, deadline: Instant) -> Result<ResultEnvelope, CommError> {
        self.wait(deadline.saturating_duration_since(Instant::now()))
    }
}

/// Waits for every handle against one shared deadline. Results keep the
/// order of `pending`.
pub fn wait_all(pending: &[PendingResult], deadline: Instant) -> Vec<Result<ResultEnvelope, CommError>> {
    pending.iter().map(|p| p.wait_until(deadline)).collect()
}

struct Delivery {
    frame: Vec<u8>,
    reply: ResultSender,
}

#[derive(Default)]
struct InProcState {
    endpoints: HashMap<String, Sender<Delivery>>,
    dispatched: HashSet<String>,
}

/// Endpoints as in-process threads. Envelopes are encoded to wire frames and
/// decoded on the other side, exactly as over TCP.
#[derive(Default)]
pub struct InProcTransport {
    state: Mutex<InProcState>,
}

impl InProcTransport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers (or replaces) an endpoint and returns its link.
    pub fn register(&self, endpoint_id: impl Into<String>) -> InProcEndpoint {
        let endpoint_id = endpoint_id.into();
        let (tx, rx) = mpsc::channel();
        self.state
            .lock()
            .expect("transport lock")
            .endpoints
            .insert(endpoint_id.clone(), tx);
        InProcEndpoint {
            endpoint_id,
            rx,
            replies: HashMap::new(),
        }
    }

    /// Drops the endpoint's queue; its link sees end of stream once drained.
    pub fn unregister(&self, endpoint_id: &str) {
        self.state.lock().expect("transport lock").endpoints.remove(endpoint_id);
    }

    pub fn shutdown(&self) {
        self.state.lock().expect("transport lock").endpoints.clear();
    }
}

impl Transport for InProcTransport {
    fn dispatch(&self, endpoint_id: &str, task: TaskEnvelope) -> Result<PendingResult, CommError> {
        let mut state = self.state.lock().expect("transport lock");
        if state.dispatched.contains(&task.task_id) {
            return Err(CommError::DuplicateTask(task.task_id));
        }
        let queue = state
            .endpoints
            .get(endpoint_id)
            .ok_or_else(|| CommError::EndpointUnknown(endpoint_id.to_string()))?;
        let (pending, reply) = PendingResult::new(task.task_id.clone(), endpoint_id.to_string());
        let delivery = Delivery {
            frame: encode_frame(&Frame::Task(task.clone())),
            reply,
        };
        if queue.send(delivery).is_err() {
            state.endpoints.remove(endpoint_id);
            return Err(CommError::EndpointUnreachable(endpoint_id.to_string()));
        }
        state.dispatched.insert(task.task_id);
        Ok(pending)
    }

    fn name(&self) -> &'static str {
        "inproc"
    }
}

pub struct InProcEndpoint {
    endpoint_id: String,
    rx: Receiver<Delivery>,
    replies: HashMap<String, ResultSender>,
}

impl EndpointLink for InProcEndpoint {
    fn endpoint_id(&self) -> &str {
        &self.endpoint_id
    }

    fn recv(&mut self) -> Result<Option<TaskEnvelope>, CommError> {
        let Ok(delivery) = self.rx.recv() else {
            return Ok(None);
        };
        match decode_frame(&delivery.frame)? {
            Frame::Task(task) => {
                self.replies.insert(task.task_id.clone(), delivery.reply);
                Ok(Some(task))
            }
            other => Err(CommError::MalformedHeader(format!("expected a task frame, got {other:?}"))),
        }
    }

    fn send(&mut self, result: ResultEnvelope) -> Result<(), CommError> {
        let Some(reply) = self.replies.remove(&result.task_id) else {
            log::warn!("{}: dropping result for unknown task {}", self.endpoint_id, result.task_id);
            return Ok(());
        };
        let decoded = match decode_frame(&encode_frame(&Frame::Result(result)))? {
            Frame::Result(r) => r,
            _ => unreachable!("result frames decode to results"),
        };
        // The server may have stopped waiting; that is not the endpoint's error.
        let _ = reply.send(Ok(decoded));
        Ok(())
    }
}
