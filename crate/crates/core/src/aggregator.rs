//! Server-side aggregation and the synchronous round barrier.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{encode_state, state_digest};
use crate::tensor::{ModelState, Tensor, TensorError};
use crate::trainer::TrainMetrics;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregateError {
    #[error("no updates to aggregate")]
    EmptyUpdateSet,
    #[error("update from {client} does not match the parameter signature of {reference}")]
    SignatureMismatch { client: String, reference: String },
    #[error("update from {client} is for round {got}, expected {expected}")]
    RoundMismatch { client: String, expected: u32, got: u32 },
    #[error("update from {client} reports zero samples")]
    ZeroSamples { client: String },
    #[error("second update from {0} in the same round")]
    DuplicateUpdate(String),
    #[error("update from {0}, which is not on the roster")]
    UnknownClient(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: String,
    pub round: u32,
    /// Trainable parameters only.
    pub state: ModelState,
    pub n_samples: usize,
    pub metrics: TrainMetrics,
}

impl ClientUpdate {
    pub fn new(client_id: impl Into<String>, round: u32, state: ModelState, n_samples: usize) -> Self {
        Self {
            client_id: client_id.into(),
            round,
            state,
            n_samples,
            metrics: TrainMetrics {
                loss: 0.0,
                n_samples,
                wall_ms: 0,
            },
        }
    }
}

/// An aggregation rule over one round's updates.
pub trait Aggregator: Send + Sync {
    fn name(&self) -> &'static str;
    fn aggregate(&self, updates: &[ClientUpdate]) -> Result<ModelState, AggregateError>;
}

/// Sample-count weighted averaging.
#[derive(Debug, Clone, Copy, Default)]
pub struct FedAvg;

impl Aggregator for FedAvg {
    fn name(&self) -> &'static str {
        "fedavg"
    }

    fn aggregate(&self, updates: &[ClientUpdate]) -> Result<ModelState, AggregateError> {
        fedavg(updates)
    }
}

fn validate(updates: &[ClientUpdate]) -> Result<&ClientUpdate, AggregateError> {
    let first = updates.first().ok_or(AggregateError::EmptyUpdateSet)?;
    for u in updates {
        if u.round != first.round {
            return Err(AggregateError::RoundMismatch {
                client: u.client_id.clone(),
                expected: first.round,
                got: u.round,
            });
        }
        if !u.state.same_signature(&first.state) {
            return Err(AggregateError::SignatureMismatch {
                client: u.client_id.clone(),
                reference: first.client_id.clone(),
            });
        }
        if u.n_samples == 0 {
            return Err(AggregateError::ZeroSamples {
                client: u.client_id.clone(),
            });
        }
    }
    Ok(first)
}

/// Fixed accumulation order: client id, then sample count, then the encoded
/// state, so any permutation of the same updates sums identically.
fn canonical_order(updates: &[ClientUpdate]) -> Vec<&ClientUpdate> {
    let mut keyed: Vec<(&ClientUpdate, Option<Vec<u8>>)> = updates.iter().map(|u| (u, None)).collect();
    let ids_unique = updates.iter().map(|u| &u.client_id).collect::<BTreeSet<_>>().len() == updates.len();
    if !ids_unique {
        for (u, bytes) in &mut keyed {
            *bytes = Some(encode_state(&u.state));
        }
    }
    keyed.sort_by(|(a, ea), (b, eb)| {
        a.client_id
            .cmp(&b.client_id)
            .then(a.n_samples.cmp(&b.n_samples))
            .then_with(|| ea.cmp(eb))
    });
    keyed.into_iter().map(|(u, _)| u).collect()
}

/// Weighted mean of the updates' states with weights `n_i / sum(n)`.
///
/// Accumulates in f64 and writes back in each tensor's dtype. Results are
/// clamped to the contributors' element-wise range so rounding can never
/// push an output outside it.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<ModelState, AggregateError> {
    let first = validate(updates)?;
    let ordered = canonical_order(updates);
    let total: u64 = ordered.iter().map(|u| u.n_samples as u64).sum();
    let weights: Vec<f64> = ordered.iter().map(|u| u.n_samples as f64 / total as f64).collect();

    let mut out = ModelState::new();
    for (name, reference) in first.state.iter() {
        let mut acc = vec![0.0f64; reference.numel()];
        let mut lo = vec![f64::INFINITY; reference.numel()];
        let mut hi = vec![f64::NEG_INFINITY; reference.numel()];
        for (u, &w) in ordered.iter().zip(&weights) {
            let values = u.state.get(name)?.to_f64_vec();
            for (i, v) in values.into_iter().enumerate() {
                acc[i] += w * v;
                lo[i] = lo[i].min(v);
                hi[i] = hi[i].max(v);
            }
        }
        for i in 0..acc.len() {
            acc[i] = acc[i].clamp(lo[i], hi[i]);
        }
        out.insert(name, Tensor::from_f64_as(reference.dims().to_vec(), acc, reference.dtype())?)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BarrierStatus {
    Complete,
    Waiting(BTreeSet<String>),
}

/// Whether every roster member has exactly one update for `round`. Updates
/// for other rounds are ignored.
pub fn check_barrier(
    roster: &BTreeSet<String>,
    received: &[ClientUpdate],
    round: u32,
) -> Result<BarrierStatus, AggregateError> {
    let mut seen = BTreeSet::new();
    for u in received.iter().filter(|u| u.round == round) {
        if !roster.contains(&u.client_id) {
            return Err(AggregateError::UnknownClient(u.client_id.clone()));
        }
        if !seen.insert(u.client_id.as_str()) {
            return Err(AggregateError::DuplicateUpdate(u.client_id.clone()));
        }
    }
    let missing: BTreeSet<String> = roster.iter().filter(|c| !seen.contains(c.as_str())).cloned().collect();
    Ok(if missing.is_empty() {
        BarrierStatus::Complete
    } else {
        BarrierStatus::Waiting(missing)
    })
}

/// Collects one round's updates; rejects duplicates and strangers as they
/// arrive.
#[derive(Debug, Clone)]
pub struct RoundBarrier {
    roster: BTreeSet<String>,
    round: u32,
    received: BTreeMap<String, ClientUpdate>,
}

impl RoundBarrier {
    pub fn new(roster: impl IntoIterator<Item = String>, round: u32) -> Self {
        Self {
            roster: roster.into_iter().collect(),
            round,
            received: BTreeMap::new(),
        }
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn offer(&mut self, update: ClientUpdate) -> Result<BarrierStatus, AggregateError> {
        if update.round != self.round {
            return Err(AggregateError::RoundMismatch {
                client: update.client_id,
                expected: self.round,
                got: update.round,
            });
        }
        if !self.roster.contains(&update.client_id) {
            return Err(AggregateError::UnknownClient(update.client_id));
        }
        if self.received.contains_key(&update.client_id) {
            return Err(AggregateError::DuplicateUpdate(update.client_id));
        }
        self.received.insert(update.client_id.clone(), update);
        Ok(self.status())
    }

    pub fn status(&self) -> BarrierStatus {
        let missing: BTreeSet<String> = self
            .roster
            .iter()
            .filter(|c| !self.received.contains_key(*c))
            .cloned()
            .collect();
        if missing.is_empty() {
            BarrierStatus::Complete
        } else {
            BarrierStatus::Waiting(missing)
        }
    }

    /// Updates received so far, ordered by client id.
    pub fn into_updates(self) -> Vec<ClientUpdate> {
        self.received.into_values().collect()
    }
}

/// Outcome of one completed global round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u32,
    pub clients: Vec<String>,
    pub state: ModelState,
    pub total_samples: usize,
    pub wall_ms: u64,
    /// Sample-weighted mean of the clients' training losses.
    pub mean_loss: f64,
}

/// Log form of a [`RoundRecord`]: the aggregated state is identified by
/// digest and size rather than inlined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: u32,
    pub clients: Vec<String>,
    pub total_samples: usize,
    pub wall_ms: u64,
    pub mean_loss: f64,
    pub state_sha256: String,
    pub state_bytes: usize,
}

impl RoundRecord {
    pub fn from_updates(
        round: u32,
        updates: &[ClientUpdate],
        aggregator: &dyn Aggregator,
        wall_ms: u64,
    ) -> Result<Self, AggregateError> {
        let state = aggregator.aggregate(updates)?;
        let total_samples = updates.iter().map(|u| u.n_samples).sum();
        let mean_loss = updates
            .iter()
            .map(|u| u.metrics.loss * u.n_samples as f64)
            .sum::<f64>()
            / total_samples as f64;
        let mut clients: Vec<String> = updates.iter().map(|u| u.client_id.clone()).collect();
        clients.sort();
        Ok(Self {
            round,
            clients,
            state,
            total_samples,
            wall_ms,
            mean_loss,
        })
    }

    pub fn summary(&self) -> RoundSummary {
        RoundSummary {
            round: self.round,
            clients: self.clients.clone(),
            total_samples: self.total_samples,
            wall_ms: self.wall_ms,
            mean_loss: self.mean_loss,
            state_sha256: state_digest(&self.state),
            state_bytes: self.state.payload_bytes(),
        }
    }
}
