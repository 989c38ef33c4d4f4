//! Local training: toy models, cross-entropy, AdamW and the per-round loop.

mod loss;
mod model;
mod optim;

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::adapters::AdapterError;
use crate::taskdata::{Dataset, DatasetProfile};
use crate::tensor::{ModelState, TensorError};

pub use loss::cross_entropy;
pub use model::{predict, ModelKind, ModelSpec, ToyModel};
pub use optim::{adamw_step, AdamWConfig, AdamWState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("training shard is empty")]
    EmptyShard,
    #[error("evaluation dataset is empty")]
    EmptyDataset,
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

/// How many mini-batches one local round runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BatchBudget {
    Count(usize),
    /// One pass over the whole shard, last batch possibly partial.
    All,
}

impl BatchBudget {
    pub fn batches_for(self, n_samples: usize, batch_size: usize) -> usize {
        match self {
            BatchBudget::Count(k) => k,
            BatchBudget::All => n_samples.div_ceil(batch_size),
        }
    }
}

impl fmt::Display for BatchBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BatchBudget::Count(k) => write!(f, "{k}"),
            BatchBudget::All => f.write_str("ALL"),
        }
    }
}

impl Serialize for BatchBudget {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            BatchBudget::Count(k) => s.serialize_u64(*k as u64),
            BatchBudget::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for BatchBudget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(k) => Ok(BatchBudget::Count(k)),
            Raw::Word(w) if w.eq_ignore_ascii_case("all") => Ok(BatchBudget::All),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "expected a batch count or \"all\", got {w:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub batch_size: usize,
    pub batches_per_round: BatchBudget,
    /// Applied by text loaders when turning prompts into features.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_token_length: Option<usize>,
    pub adamw: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            decay: 0.85,
            batch_size: 4,
            batches_per_round: BatchBudget::All,
            max_token_length: None,
            adamw: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl TrainerConfig {
    /// Defaults with the round budget and token limit of a dataset profile.
    pub fn for_profile(profile: &DatasetProfile) -> Self {
        Self {
            batches_per_round: profile.batches_per_round,
            max_token_length: Some(profile.max_token_length),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("decay must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.batches_per_round == BatchBudget::Count(0) {
            return bad("batches_per_round must be at least 1");
        }
        if self.max_token_length == Some(0) {
            return bad("max_token_length must be at least 1");
        }
        let a = &self.adamw;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.epsilon <= 0.0 || a.weight_decay < 0.0 {
            return bad("adamw needs betas in [0, 1), epsilon > 0 and weight_decay >= 0");
        }
        Ok(())
    }

    /// The decay schedule: `learning_rate * decay^global_round`.
    pub fn effective_lr(&self, global_round: u32) -> f64 {
        let exp = i32::try_from(global_round).unwrap_or(i32::MAX);
        self.learning_rate * self.decay.powi(exp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    /// Mean pre-update batch loss over the round, weighted by batch size.
    pub loss: f64,
    pub n_samples: usize,
    pub wall_ms: u64,
}

/// Sample order for one round: concatenated shuffles of the shard, cut into
/// batches. Seeded by the config seed with the round as stream id.
fn batch_plan(n: usize, config: &TrainerConfig, global_round: u32) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::from(global_round));
    let batches = config.batches_per_round.batches_for(n, config.batch_size);
    let mut order: Vec<usize> = Vec::new();
    let mut plan = Vec::with_capacity(batches);
    let mut cursor = 0;
    for _ in 0..batches {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                if config.batches_per_round == BatchBudget::All && !order.is_empty() {
                    break;
                }
                order = (0..n).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        plan.push(batch);
    }
    plan
}

/// Number of mini-batches (and their sizes) one round would run.
pub fn round_batch_sizes(n_samples: usize, config: &TrainerConfig) -> Vec<usize> {
    if n_samples == 0 {
        return Vec::new();
    }
    batch_plan(n_samples, config, 0).iter().map(Vec::len).collect()
}

fn check_data(model: &ToyModel, data: &Dataset) -> Result<(), TrainError> {
    if data.dim() != model.input_dim() {
        return Err(TrainError::ShapeMismatch(format!(
            "data has {} features, model expects {}",
            data.dim(),
            model.input_dim()
        )));
    }
    Ok(())
}

/// Runs one local round on `shard` and returns the updated trainable
/// parameters. Optimizer state starts fresh on every call.
pub fn local_train(
    model: &ToyModel,
    shard: &Dataset,
    config: &TrainerConfig,
    global_round: u32,
) -> Result<(ModelState, TrainMetrics), TrainError> {
    let started = Instant::now();
    config.validate()?;
    if shard.is_empty() {
        return Err(TrainError::EmptyShard);
    }
    check_data(model, shard)?;
    let lr = config.effective_lr(global_round);
    let mut working = model.clone();
    let mut opt = AdamWState::new();
    let mut loss_sum = 0.0;
    let mut seen = 0usize;
    for batch in batch_plan(shard.len(), config, global_round) {
        let part = shard.subset(&batch);
        let (loss, grads) = working.loss_and_grad_buffers(part.features(), part.labels())?;
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        opt.update(&mut working.trainable_buffers_mut(), &grad_refs, lr, &config.adamw)?;
        loss_sum += loss * batch.len() as f64;
        seen += batch.len();
    }
    working.round_to_dtype();
    let metrics = TrainMetrics {
        loss: loss_sum / seen as f64,
        n_samples: shard.len(),
        wall_ms: started.elapsed().as_millis() as u64,
    };
    Ok((working.trainable_state(), metrics))
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn evaluate(model: &ToyModel, data: &Dataset) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_data(model, data)?;
    let predictions = predict(&model.logits(data.features())?);
    let correct = predictions.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}
