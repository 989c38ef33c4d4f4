//! Reference points for a federated run: one model on the pooled data and
//! one model per client shard, each with the federated run's per-model
//! training budget, all scored on the shared validation split.

use std::thread;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ResolvedFederation};
use super::server::{accuracy_of, load_validation};
use super::OrchestratorError;
use crate::federation::{load_dataset, LoaderSpec};
use crate::taskdata::Dataset;
use crate::tensor::ModelState;
use crate::trainer::{local_train, ModelSpec, ToyModel, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub global_accuracy: f64,
    /// Roster order.
    pub clients: Vec<String>,
    pub local_accuracies: Vec<f64>,
    /// Unweighted mean of `local_accuracies`.
    pub local_average: f64,
}

/// Trains the configured model for `rounds` consecutive local rounds on
/// `data`, with the same schedule a federated client follows.
pub fn train_rounds(
    spec: &ModelSpec,
    data: &Dataset,
    trainer: &TrainerConfig,
    rounds: u32,
) -> Result<ModelState, OrchestratorError> {
    let mut model = ToyModel::init(spec)?;
    for round in 0..rounds {
        let (state, _) = local_train(&model, data, trainer, round)?;
        model = model.with_trainable(&state)?;
    }
    Ok(model.trainable_state())
}

pub fn run_baselines(config: &ExperimentConfig, fed: &ResolvedFederation) -> Result<BaselineReport, OrchestratorError> {
    config.validate()?;
    let val = load_validation(fed)?
        .ok_or_else(|| OrchestratorError::Config("baselines need a validation split (data.validation)".into()))?;
    let shards: Vec<Dataset> = fed
        .loaders
        .iter()
        .map(|spec| Ok(load_dataset(&LoaderSpec::parse(spec)?)?))
        .collect::<Result<_, OrchestratorError>>()?;
    let trainer = config.effective_trainer();
    let rounds = config.global_rounds;
    let pooled = Dataset::concat(&shards.iter().collect::<Vec<_>>())?;

    let (global, locals) = thread::scope(|s| {
        let global = s.spawn(|| train_rounds(&config.model, &pooled, &trainer, rounds));
        let locals: Vec<_> = shards
            .iter()
            .map(|shard| s.spawn(|| train_rounds(&config.model, shard, &trainer, rounds)))
            .collect();
        (
            global.join().expect("baseline thread"),
            locals
                .into_iter()
                .map(|h| h.join().expect("baseline thread"))
                .collect::<Vec<_>>(),
        )
    });
    let global_accuracy = accuracy_of(&config.model, &global?, &val)?;
    let local_accuracies = locals
        .into_iter()
        .map(|state| accuracy_of(&config.model, &state?, &val))
        .collect::<Result<Vec<_>, _>>()?;
    let local_average = local_accuracies.iter().sum::<f64>() / local_accuracies.len() as f64;
    Ok(BaselineReport {
        global_accuracy,
        clients: fed.roster.clone(),
        local_accuracies,
        local_average,
    })
}
