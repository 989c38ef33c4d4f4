//! Declarative dataloaders: a data source plus an optional shard selection.
//!
//! ```text
//! synthetic:blobs?classes=10&n=2000&seed=7
//! csv:/data/site-a.csv?label=y
//! json:/data/site-b.json?shard=1/4&alpha1=2&alpha2=8&pseed=3
//! ```
//!
//! `shard=i/K` keeps client `i` of a dual-Dirichlet split of the source into
//! `K` parts (`alpha1`, `alpha2` and `pseed` default to 2, 8 and 0).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::Array2;
use serde::Deserialize;
use thiserror::Error;

use crate::partition::{client_shard, PartitionConfig};
use crate::taskdata::{parse_query, synth_dataset, Dataset, GeneratorSpec, TaskDataError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LoaderError {
    #[error("dataloader name must not be empty")]
    EmptyName,
    #[error("dataloader {0:?} is already registered")]
    DuplicateName(String),
    #[error("no dataloader named {0:?}")]
    UnknownName(String),
    #[error("bad loader spec: {0}")]
    BadSpec(String),
    #[error("cannot read {path}: {detail}")]
    SourceUnreadable { path: String, detail: String },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
}

impl From<TaskDataError> for LoaderError {
    fn from(e: TaskDataError) -> Self {
        match e {
            TaskDataError::SchemaMismatch(m) => LoaderError::SchemaMismatch(m),
            other => LoaderError::BadSpec(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceSpec {
    Synthetic(GeneratorSpec),
    Csv {
        path: PathBuf,
        label: String,
        classes: Option<usize>,
    },
    Json {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardSpec {
    pub index: usize,
    pub partition: PartitionConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoaderSpec {
    pub source: SourceSpec,
    pub shard: Option<ShardSpec>,
}

fn bad(msg: impl Into<String>) -> LoaderError {
    LoaderError::BadSpec(msg.into())
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, LoaderError> {
    value.parse().map_err(|_| bad(format!("cannot parse {key}={value}")))
}

fn take_shard(params: &mut BTreeMap<String, String>) -> Result<Option<ShardSpec>, LoaderError> {
    let shard = params.remove("shard");
    let alpha1 = params.remove("alpha1");
    let alpha2 = params.remove("alpha2");
    let pseed = params.remove("pseed");
    let Some(shard) = shard else {
        if alpha1.is_some() || alpha2.is_some() || pseed.is_some() {
            return Err(bad("alpha1/alpha2/pseed given without shard=i/K"));
        }
        return Ok(None);
    };
    let (i, k) = shard
        .split_once('/')
        .ok_or_else(|| bad(format!("shard must look like i/K, got {shard}")))?;
    let index: usize = parse_num("shard", i)?;
    let n_clients: usize = parse_num("shard", k)?;
    if index >= n_clients {
        return Err(bad(format!("shard index {index} outside 0..{n_clients}")));
    }
    let partition = PartitionConfig::new(
        n_clients,
        alpha1.map_or(Ok(2.0), |v| parse_num("alpha1", &v))?,
        alpha2.map_or(Ok(8.0), |v| parse_num("alpha2", &v))?,
        pseed.map_or(Ok(0), |v| parse_num("pseed", &v))?,
    );
    partition.validate().map_err(|e| bad(e.to_string()))?;
    Ok(Some(ShardSpec { index, partition }))
}

fn query_string(params: &BTreeMap<String, String>) -> String {
    params.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join("&")
}

impl LoaderSpec {
    pub fn parse(spec: &str) -> Result<Self, LoaderError> {
        let (scheme, rest) = spec
            .split_once(':')
            .ok_or_else(|| bad(format!("{spec:?} has no scheme (synthetic:, csv: or json:)")))?;
        let (target, query) = rest.split_once('?').unwrap_or((rest, ""));
        let mut params = parse_query(query)?;
        let shard = take_shard(&mut params)?;
        let source = match scheme {
            "synthetic" => {
                let spec = format!("{target}?{}", query_string(&params));
                params.clear();
                SourceSpec::Synthetic(GeneratorSpec::parse(&spec)?)
            }
            "csv" => SourceSpec::Csv {
                path: PathBuf::from(target),
                label: params.remove("label").unwrap_or_else(|| "label".into()),
                classes: params.remove("classes").map(|v| parse_num("classes", &v)).transpose()?,
            },
            "json" => SourceSpec::Json {
                path: PathBuf::from(target),
            },
            other => return Err(bad(format!("unknown scheme {other:?}"))),
        };
        if let Some(k) = params.keys().next() {
            return Err(bad(format!("unknown parameter {k}")));
        }
        if let SourceSpec::Csv { path, .. } | SourceSpec::Json { path } = &source {
            if path.as_os_str().is_empty() {
                return Err(bad("missing file path"));
            }
        }
        Ok(Self { source, shard })
    }

    fn path(&self) -> Option<&Path> {
        match &self.source {
            SourceSpec::Csv { path, .. } | SourceSpec::Json { path } => Some(path),
            SourceSpec::Synthetic(_) => None,
        }
    }
}

fn unreadable(path: &Path, e: impl std::fmt::Display) -> LoaderError {
    LoaderError::SourceUnreadable {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

fn finish(rows: Vec<Vec<f64>>, labels: Vec<usize>, classes: Option<usize>) -> Result<Dataset, LoaderError> {
    if rows.is_empty() {
        return Err(LoaderError::SchemaMismatch("source has no samples".into()));
    }
    let dim = rows[0].len();
    if dim == 0 {
        return Err(LoaderError::SchemaMismatch("samples have no features".into()));
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
        return Err(LoaderError::SchemaMismatch(format!(
            "sample {i} has {} features, expected {dim}",
            r.len()
        )));
    }
    let class_count = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let features = Array2::from_shape_vec((labels.len(), dim), flat)
        .map_err(|e| LoaderError::SchemaMismatch(e.to_string()))?;
    Ok(Dataset::new(features, labels, class_count)?)
}

fn load_csv(path: &Path, label: &str, classes: Option<usize>) -> Result<Dataset, LoaderError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| unreadable(path, e))?;
    let headers = reader.headers().map_err(|e| unreadable(path, e))?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == label)
        .ok_or_else(|| LoaderError::SchemaMismatch(format!("no label column {label:?} in {}", path.display())))?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| LoaderError::SchemaMismatch(e.to_string()))?;
        let mut row = Vec::with_capacity(record.len().saturating_sub(1));
        for (col, field) in record.iter().enumerate() {
            let field = field.trim();
            if col == label_col {
                labels.push(field.parse().map_err(|_| {
                    LoaderError::SchemaMismatch(format!("row {}: label {field:?} is not a class index", line + 1))
                })?);
            } else {
                row.push(field.parse().map_err(|_| {
                    LoaderError::SchemaMismatch(format!(
                        "row {}: {:?} in column {:?} is not a number",
                        line + 1,
                        field,
                        &headers[col]
                    ))
                })?);
            }
        }
        rows.push(row);
    }
    finish(rows, labels, classes)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonSource {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    #[serde(default)]
    class_count: Option<usize>,
}

fn load_json(path: &Path) -> Result<Dataset, LoaderError> {
    let text = fs::read_to_string(path).map_err(|e| unreadable(path, e))?;
    let source: JsonSource = serde_json::from_str(&text).map_err(|e| LoaderError::SchemaMismatch(e.to_string()))?;
    if source.features.len() != source.labels.len() {
        return Err(LoaderError::SchemaMismatch(format!(
            "{} feature rows but {} labels",
            source.features.len(),
            source.labels.len()
        )));
    }
    finish(source.features, source.labels, source.class_count)
}

/// Loads the data a spec describes, applying its shard selection.
pub fn load_dataset(spec: &LoaderSpec) -> Result<Dataset, LoaderError> {
    let full = match &spec.source {
        SourceSpec::Synthetic(g) => synth_dataset(g)?,
        SourceSpec::Csv { path, label, classes } => load_csv(path, label, *classes)?,
        SourceSpec::Json { path } => load_json(path)?,
    };
    match &spec.shard {
        None => Ok(full),
        Some(shard) => {
            let idx = client_shard(full.labels(), &shard.partition, shard.index)
                .map_err(|e| LoaderError::SchemaMismatch(e.to_string()))?;
            Ok(full.subset(&idx))
        }
    }
}

/// Named loader specs. Every actual load is counted.
#[derive(Debug, Default)]
pub struct DataloaderRegistry {
    specs: BTreeMap<String, LoaderSpec>,
    loads: Arc<AtomicUsize>,
}

impl DataloaderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, spec: &str) -> Result<(), LoaderError> {
        if name.trim().is_empty() {
            return Err(LoaderError::EmptyName);
        }
        if self.specs.contains_key(name) {
            return Err(LoaderError::DuplicateName(name.to_string()));
        }
        let parsed = LoaderSpec::parse(spec)?;
        if let Some(path) = parsed.path() {
            fs::metadata(path).map_err(|e| unreadable(path, e))?;
        }
        self.specs.insert(name.to_string(), parsed);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.specs.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.keys().map(String::as_str)
    }

    pub fn load(&self, name: &str) -> Result<Dataset, LoaderError> {
        let spec = self
            .specs
            .get(name)
            .ok_or_else(|| LoaderError::UnknownName(name.to_string()))?;
        self.loads.fetch_add(1, Ordering::SeqCst);
        load_dataset(spec)
    }

    pub fn load_count(&self) -> usize {
        self.loads.load(Ordering::SeqCst)
    }

    /// Shared handle on the load counter, readable after the registry has
    /// moved into an endpoint.
    pub fn load_counter(&self) -> Arc<AtomicUsize> {
        Arc::clone(&self.loads)
    }
}
