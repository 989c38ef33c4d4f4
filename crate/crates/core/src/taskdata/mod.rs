//! Experiment data plumbing: prompt templates, per-dataset profiles and
//! synthetic datasets.

mod dataset;
pub mod profiles;
pub mod prompts;
pub mod synth;

use std::collections::BTreeMap;

use thiserror::Error;

pub use dataset::Dataset;
pub use profiles::{all_profiles, profile_for, profile_named, DatasetProfile};
pub use prompts::{
    format_prompt, format_prompt_named, truncate_tokens, AlpacaScaffold, DatasetKind, Prompt, PromptTemplate, ALPACA,
};
pub use synth::{synth_dataset, synth_from_str, GeneratorSpec, Split};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaskDataError {
    #[error("sample is missing field {0:?}")]
    MissingField(String),
    #[error("unknown dataset kind {0:?}")]
    UnknownDatasetKind(String),
    #[error("bad generator parameters: {0}")]
    BadGeneratorParams(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
}

/// Parses `a=1&b=2` into a map. Keys must be unique.
pub fn parse_query(query: &str) -> Result<BTreeMap<String, String>, TaskDataError> {
    let mut out = BTreeMap::new();
    for pair in query.split('&').filter(|p| !p.is_empty()) {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| TaskDataError::BadGeneratorParams(format!("expected key=value, got {pair:?}")))?;
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(TaskDataError::BadGeneratorParams(format!("repeated parameter {k}")));
        }
    }
    Ok(out)
}
