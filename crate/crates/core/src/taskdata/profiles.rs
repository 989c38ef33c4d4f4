use serde::{Deserialize, Serialize};

use super::prompts::DatasetKind;
use super::TaskDataError;
use crate::trainer::BatchBudget;

/// Per-dataset local-round budget and prompt length limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub kind: DatasetKind,
    pub batches_per_round: BatchBudget,
    pub max_token_length: usize,
}

pub fn profile_for(kind: DatasetKind) -> DatasetProfile {
    use BatchBudget::{All, Count};
    let (batches_per_round, max_token_length) = match kind {
        DatasetKind::BoolQ => (Count(200), 350),
        DatasetKind::CB => (All, 350),
        DatasetKind::COPA => (All, 300),
        DatasetKind::MultiRC => (Count(200), 600),
        DatasetKind::RTE => (Count(200), 200),
        DatasetKind::WiC => (Count(200), 200),
        DatasetKind::WSC => (All, 220),
    };
    DatasetProfile {
        kind,
        batches_per_round,
        max_token_length,
    }
}

pub fn profile_named(kind: &str) -> Result<DatasetProfile, TaskDataError> {
    Ok(profile_for(kind.parse()?))
}

/// Every bundled profile, in canonical order.
pub fn all_profiles() -> Vec<DatasetProfile> {
    DatasetKind::ALL.into_iter().map(profile_for).collect()
}
