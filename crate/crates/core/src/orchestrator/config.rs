//! Experiment configuration and how it resolves to a federation, a roster
//! and per-client dataloaders.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::comm::{ObjectStore, StoreConfig, DEFAULT_INLINE_THRESHOLD, DEFAULT_TIMEOUT_SECS};
use crate::federation::{
    add_member, create_federation_seeded, register_endpoint_with_rng, FederationManifest,
};
use crate::partition::PartitionConfig;
use crate::taskdata::{profile_for, DatasetKind};
use crate::trainer::{ModelSpec, TrainerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Fedavg,
}

/// Where client and validation data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Loader spec for the full training pool, split across clients with
    /// the experiment's partition settings.
    pub source: String,
    /// Loader spec of the shared validation split. Synthetic sources default
    /// to their `split=val` counterpart.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<String>,
    /// Explicit per-client loader specs, in roster order, instead of
    /// partitioning `source`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shards: Vec<String>,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_rounds() -> u32 {
    5
}
fn default_threshold() -> usize {
    DEFAULT_INLINE_THRESHOLD
}
fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_SECS
}
fn default_ttl() -> u64 {
    3600
}
fn default_listen() -> String {
    "127.0.0.1:7450".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label used in reports, e.g. the dataset name.
    #[serde(default = "default_name")]
    pub name: String,
    /// Federation manifest file. Without one, a federation with
    /// `partition.n_clients` endpoints is derived from `seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Endpoint ids taking part; empty means every endpoint in the manifest.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub roster: Vec<String>,
    #[serde(default = "default_rounds")]
    pub global_rounds: u32,
    #[serde(default)]
    pub aggregation: Aggregation,
    pub model: ModelSpec,
    #[serde(default)]
    pub trainer: TrainerConfig,
    /// Applies that dataset's batch budget and token limit to `trainer`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<DatasetKind>,
    pub data: DataConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default = "default_threshold")]
    pub inline_threshold: usize,
    /// Object store shared with the endpoints; defaults to
    /// `<output_dir>/objects`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store: Option<StoreConfig>,
    /// Seeds the derived federation (group id, secret, endpoint ids).
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_timeout")]
    pub round_timeout_secs: u64,
    #[serde(default = "default_ttl")]
    pub token_ttl_secs: u64,
    /// TCP listen address for non-simulated runs.
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

/// A federation ready to run: manifest, roster and each client's loader.
#[derive(Debug, Clone)]
pub struct ResolvedFederation {
    pub manifest: FederationManifest,
    pub roster: Vec<String>,
    /// Loader spec per roster entry.
    pub loaders: Vec<String>,
    pub validation: Option<String>,
}

impl ResolvedFederation {
    pub fn loader_for(&self, endpoint_id: &str) -> Option<&str> {
        self.roster
            .iter()
            .position(|e| e == endpoint_id)
            .map(|i| self.loaders[i].as_str())
    }
}

fn invalid(msg: impl Into<String>) -> OrchestratorError {
    OrchestratorError::Config(msg.into())
}

fn append_query(spec: &str, query: &str) -> String {
    let sep = if spec.contains('?') { '&' } else { '?' };
    format!("{spec}{sep}{query}")
}

impl ExperimentConfig {
    /// A minimal config: `model` trained on `source`, everything else default.
    pub fn new(model: ModelSpec, source: impl Into<String>) -> Self {
        Self {
            name: default_name(),
            manifest: None,
            roster: Vec::new(),
            global_rounds: default_rounds(),
            aggregation: Aggregation::Fedavg,
            model,
            trainer: TrainerConfig::default(),
            profile: None,
            data: DataConfig {
                source: source.into(),
                validation: None,
                shards: Vec::new(),
            },
            partition: PartitionConfig::default(),
            inline_threshold: default_threshold(),
            store: None,
            seed: 0,
            round_timeout_secs: default_timeout(),
            token_ttl_secs: default_ttl(),
            listen: default_listen(),
            output_dir: None,
        }
    }

    /// Reads a JSON config. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = fs::read_to_string(path).map_err(|e| OrchestratorError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(m) = cfg.manifest.as_mut() {
            rebase(m);
        }
        if let Some(o) = cfg.output_dir.as_mut() {
            rebase(o);
        }
        if let Some(StoreConfig::Fs { root }) = cfg.store.as_mut() {
            rebase(root);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if self.global_rounds == 0 {
            return Err(invalid("global_rounds must be at least 1"));
        }
        if self.inline_threshold == 0 {
            return Err(invalid("inline_threshold must be positive"));
        }
        if self.round_timeout_secs == 0 {
            return Err(invalid("round_timeout_secs must be positive"));
        }
        if self.manifest.is_none() && !self.roster.is_empty() {
            return Err(invalid("a roster needs a manifest"));
        }
        self.partition.validate().map_err(|e| invalid(e.to_string()))?;
        self.effective_trainer().validate().map_err(|e| invalid(e.to_string()))?;
        if let Some(a) = &self.model.adapter {
            a.validate().map_err(|e| invalid(e.to_string()))?;
        }
        Ok(())
    }

    /// The trainer settings after applying `profile`.
    pub fn effective_trainer(&self) -> TrainerConfig {
        let mut t = self.trainer.clone();
        if let Some(kind) = self.profile {
            let p = profile_for(kind);
            t.batches_per_round = p.batches_per_round;
            t.max_token_length = Some(p.max_token_length);
        }
        t
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }

    pub fn run_log_path(&self) -> PathBuf {
        self.output_dir().join("run.jsonl")
    }

    pub fn store_config(&self) -> StoreConfig {
        self.store.clone().unwrap_or_else(|| StoreConfig::Fs {
            root: self.output_dir().join("objects"),
        })
    }

    pub fn open_store(&self) -> Result<std::sync::Arc<dyn ObjectStore>, OrchestratorError> {
        Ok(self.store_config().open()?)
    }

    /// Loader spec of client `index` out of `n_clients`.
    pub fn client_loader(&self, index: usize, n_clients: usize) -> Result<String, OrchestratorError> {
        if !self.data.shards.is_empty() {
            if self.data.shards.len() != n_clients {
                return Err(invalid(format!(
                    "{} explicit shards for {n_clients} clients",
                    self.data.shards.len()
                )));
            }
            return Ok(self.data.shards[index].clone());
        }
        let p = &self.partition;
        Ok(append_query(
            &self.data.source,
            &format!(
                "shard={index}/{n_clients}&alpha1={}&alpha2={}&pseed={}",
                p.alpha1, p.alpha2, p.seed
            ),
        ))
    }

    pub fn validation_loader(&self) -> Option<String> {
        if let Some(v) = &self.data.validation {
            return Some(v.clone());
        }
        let src = &self.data.source;
        (src.starts_with("synthetic:") && !src.contains("split=")).then(|| append_query(src, "split=val"))
    }

    /// The manifest, roster and loaders this experiment runs with.
    pub fn resolve(&self) -> Result<ResolvedFederation, OrchestratorError> {
        let (manifest, roster) = match &self.manifest {
            Some(path) => {
                let manifest = FederationManifest::load(path)?;
                let roster = if self.roster.is_empty() {
                    manifest.endpoint_ids()
                } else {
                    self.roster.clone()
                };
                if let Some(stray) = roster.iter().find(|id| manifest.endpoint(id).is_none()) {
                    return Err(invalid(format!("roster endpoint {stray} is not in the manifest")));
                }
                let mut seen = std::collections::HashSet::new();
                if let Some(dup) = roster.iter().find(|id| !seen.insert(id.as_str())) {
                    return Err(invalid(format!("endpoint {dup} appears twice in the roster")));
                }
                (manifest, roster)
            }
            None => derived_federation(self.partition.n_clients, self.seed)?,
        };
        if roster.is_empty() {
            return Err(invalid("roster is empty"));
        }
        if self.data.shards.is_empty() && self.partition.n_clients != roster.len() {
            return Err(invalid(format!(
                "partition.n_clients is {} but the roster has {} endpoints",
                self.partition.n_clients,
                roster.len()
            )));
        }
        let loaders = (0..roster.len())
            .map(|i| self.client_loader(i, roster.len()))
            .collect::<Result<_, _>>()?;
        Ok(ResolvedFederation {
            manifest,
            roster,
            loaders,
            validation: self.validation_loader(),
        })
    }
}

/// Seed-derived federation: owner `server` and one member site per client.
pub fn derived_federation(
    n_clients: usize,
    seed: u64,
) -> Result<(FederationManifest, Vec<String>), OrchestratorError> {
    let mut manifest = create_federation_seeded("server", "server@localhost", seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x656e_6470_6f69_6e74);
    let mut roster = Vec::with_capacity(n_clients);
    for i in 0..n_clients {
        let site = format!("site-{i}");
        add_member(&mut manifest, &site, &format!("{site}@localhost"))?;
        let rec = register_endpoint_with_rng(&mut manifest, &site, &format!("{site}-data"), "", &mut rng)?;
        roster.push(rec.endpoint_id);
    }
    Ok((manifest, roster))
}
