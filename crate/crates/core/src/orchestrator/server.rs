//! The synchronous server loop and the two ways of hosting endpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::config::{ExperimentConfig, ResolvedFederation};
use super::runlog::{kinds, RunLog};
use super::{OrchestratorError, RunAbort, RunReport};
use crate::aggregator::{BarrierStatus, ClientUpdate, FedAvg, RoundBarrier, RoundRecord};
use crate::codec::{decode_state, encode_state, state_digest};
use crate::comm::{
    content_key, make_payload, resolve_payload, InProcTransport, ObjectStore, PayloadRef, ResultEnvelope, TaskEnvelope,
    TaskStatus, TcpServer, Transport,
};
use crate::federation::{
    issue_token, load_dataset, run_endpoint, DataloaderRegistry, EndpointConfig, EndpointRuntime, EvalTaskConfig,
    LoaderSpec, TrainTaskConfig,
};
use crate::taskdata::{Dataset, Split};
use crate::tensor::ModelState;
use crate::trainer::{evaluate, ToyModel, TrainMetrics};

enum Outcome {
    Done(ResultEnvelope),
    Failed(String),
    Timeout,
    Unreachable,
}

struct Server<'a> {
    config: &'a ExperimentConfig,
    fed: &'a ResolvedFederation,
    transport: &'a dyn Transport,
    store: &'a dyn ObjectStore,
    log: &'a mut RunLog,
    sender: String,
}

impl Server<'_> {
    /// Sends `function` to every roster endpoint and waits for all of them
    /// against one deadline. Every dispatched task gets a terminal log entry.
    fn fan_out(
        &mut self,
        function: &str,
        round: u32,
        task_config: &Value,
        payload: &PayloadRef,
    ) -> Result<Vec<(String, Outcome)>, OrchestratorError> {
        let mut pending = Vec::new();
        let mut outcomes = Vec::new();
        for endpoint in &self.fed.roster {
            let mut task = TaskEnvelope::new(function, round, self.sender.clone());
            task.config = task_config.clone();
            task.payload = payload.clone();
            task.auth_token = issue_token(
                &self.fed.manifest,
                &self.sender,
                &task.task_id,
                round,
                self.config.token_ttl_secs,
            )?;
            let task_id = task.task_id.clone();
            self.log.write(
                kinds::TASK_DISPATCHED,
                json!({
                    "task_id": task_id,
                    "endpoint": endpoint,
                    "function": function,
                    "round": round,
                    "payload": payload,
                }),
            )?;
            match self.transport.dispatch(endpoint, task) {
                Ok(p) => pending.push(p),
                Err(e) => {
                    self.log.write(
                        kinds::TASK_FINISHED,
                        json!({ "task_id": task_id, "endpoint": endpoint, "status": "unreachable", "detail": e.to_string() }),
                    )?;
                    outcomes.push((endpoint.clone(), Outcome::Unreachable));
                }
            }
        }
        let deadline = Instant::now() + Duration::from_secs(self.config.round_timeout_secs);
        for p in pending {
            let endpoint = p.endpoint_id().to_string();
            let (outcome, entry) = match p.wait_until(deadline) {
                Ok(result) => match &result.status {
                    TaskStatus::Ok => {
                        let entry = json!({
                            "task_id": p.task_id(),
                            "endpoint": endpoint,
                            "status": "ok",
                            "payload": result.payload,
                            "metrics": result.metrics,
                        });
                        (Outcome::Done(result), entry)
                    }
                    TaskStatus::Failed { reason } => {
                        let entry = json!({
                            "task_id": p.task_id(),
                            "endpoint": endpoint,
                            "status": "failed",
                            "reason": reason,
                        });
                        (Outcome::Failed(reason.to_string()), entry)
                    }
                },
                Err(crate::comm::CommError::Timeout { .. }) => (
                    Outcome::Timeout,
                    json!({ "task_id": p.task_id(), "endpoint": endpoint, "status": "timeout" }),
                ),
                Err(e) => (
                    Outcome::Unreachable,
                    json!({ "task_id": p.task_id(), "endpoint": endpoint, "status": "unreachable", "detail": e.to_string() }),
                ),
            };
            self.log.write(kinds::TASK_FINISHED, entry)?;
            outcomes.push((endpoint, outcome));
        }
        Ok(outcomes)
    }

    fn share(&self, state: &ModelState) -> Result<PayloadRef, RunAbort> {
        make_payload(encode_state(state), self.store, self.config.inline_threshold).map_err(|e| RunAbort::Store {
            detail: e.to_string(),
        })
    }

    /// Turns non-success outcomes into the abort they cause. Unreachable
    /// endpoints win over timeouts, which win over task failures.
    fn check_outcomes(round: u32, outcomes: &[(String, Outcome)]) -> Result<(), RunAbort> {
        if let Some((ep, _)) = outcomes.iter().find(|(_, o)| matches!(o, Outcome::Unreachable)) {
            return Err(RunAbort::EndpointUnreachable { endpoint: ep.clone() });
        }
        let mut missing: Vec<String> = outcomes
            .iter()
            .filter(|(_, o)| !matches!(o, Outcome::Done(_)))
            .map(|(ep, _)| ep.clone())
            .collect();
        if outcomes.iter().any(|(_, o)| matches!(o, Outcome::Timeout)) {
            missing.sort();
            return Err(RunAbort::RoundTimeout { round, missing });
        }
        if let Some((ep, Outcome::Failed(detail))) = outcomes.iter().find(|(_, o)| matches!(o, Outcome::Failed(_))) {
            return Err(RunAbort::ClientFailed {
                round,
                endpoint: ep.clone(),
                detail: detail.clone(),
            });
        }
        Ok(())
    }

    fn train_round(&mut self, round: u32, global: &ModelState, val: Option<&Dataset>) -> Result<Result<RoundRecord, RunAbort>, OrchestratorError> {
        let started = Instant::now();
        let payload = match self.share(global) {
            Ok(p) => p,
            Err(abort) => return Ok(Err(abort)),
        };
        let task_config = serde_json::to_value(TrainTaskConfig {
            model: self.config.model.clone(),
            trainer: self.config.effective_trainer(),
        })
        .expect("task config serializes");
        let outcomes = self.fan_out("local_train", round, &task_config, &payload)?;
        let mut barrier = RoundBarrier::new(self.fed.roster.iter().cloned(), round);
        for (endpoint, outcome) in &outcomes {
            let Outcome::Done(result) = outcome else { continue };
            let update = match self.to_update(round, endpoint, result) {
                Ok(u) => u,
                Err(detail) => {
                    return Ok(Err(RunAbort::ClientFailed {
                        round,
                        endpoint: endpoint.clone(),
                        detail,
                    }))
                }
            };
            if let Err(e) = barrier.offer(update) {
                return Ok(Err(RunAbort::Aggregation {
                    round,
                    detail: e.to_string(),
                }));
            }
        }
        if let Err(abort) = Self::check_outcomes(round, &outcomes) {
            return Ok(Err(abort));
        }
        if let BarrierStatus::Waiting(missing) = barrier.status() {
            return Ok(Err(RunAbort::RoundTimeout {
                round,
                missing: missing.into_iter().collect(),
            }));
        }
        let updates = barrier.into_updates();
        let wall_ms = started.elapsed().as_millis() as u64;
        let record = match RoundRecord::from_updates(round, &updates, &FedAvg, wall_ms) {
            Ok(r) => r,
            Err(e) => {
                return Ok(Err(RunAbort::Aggregation {
                    round,
                    detail: e.to_string(),
                }))
            }
        };
        let mut entry = serde_json::to_value(record.summary()).expect("summary serializes");
        if let Some(val) = val {
            entry["val_accuracy"] = json!(accuracy_of(&self.config.model, &record.state, val)?);
        }
        entry["client_samples"] = json!(updates
            .iter()
            .map(|u| (u.client_id.clone(), u.n_samples))
            .collect::<BTreeMap<_, _>>());
        self.log.write(kinds::ROUND_COMPLETED, entry)?;
        Ok(Ok(record))
    }

    fn to_update(&self, round: u32, endpoint: &str, result: &ResultEnvelope) -> Result<ClientUpdate, String> {
        if result.client_id != endpoint {
            return Err(format!("result claims to come from {}", result.client_id));
        }
        let bytes = resolve_payload(&result.payload, self.store).map_err(|e| e.to_string())?;
        let state = decode_state(&bytes).map_err(|e| e.to_string())?;
        let metrics: TrainMetrics =
            serde_json::from_value(result.metrics.clone()).map_err(|e| format!("bad training metrics: {e}"))?;
        Ok(ClientUpdate {
            client_id: endpoint.to_string(),
            round,
            state,
            n_samples: metrics.n_samples,
            metrics,
        })
    }
}

/// Accuracy of the configured model carrying `trainable` on `data`.
pub fn accuracy_of(
    spec: &crate::trainer::ModelSpec,
    trainable: &ModelState,
    data: &Dataset,
) -> Result<f64, OrchestratorError> {
    let model = ToyModel::init(spec)?.with_trainable(trainable)?;
    Ok(evaluate(&model, data)?)
}

pub fn load_validation(fed: &ResolvedFederation) -> Result<Option<Dataset>, OrchestratorError> {
    fed.validation
        .as_deref()
        .map(|spec| Ok(load_dataset(&LoaderSpec::parse(spec)?)?))
        .transpose()
}

/// Runs the experiment over `transport`, whose endpoints must already be
/// serving. In-run failures end in a report flagged `aborted`.
pub fn run_federated(
    config: &ExperimentConfig,
    fed: &ResolvedFederation,
    transport: &dyn Transport,
    store: &dyn ObjectStore,
    log: &mut RunLog,
) -> Result<RunReport, OrchestratorError> {
    config.validate()?;
    let initial = ToyModel::init(&config.model)?;
    let val = load_validation(fed)?;
    let mut report = RunReport::new(config, fed, transport.name());
    log.write(
        kinds::RUN_STARTED,
        json!({
            "name": config.name,
            "group_id": fed.manifest.group_id,
            "roster": fed.roster,
            "transport": transport.name(),
            "global_rounds": config.global_rounds,
            "inline_threshold": config.inline_threshold,
            "store": store.describe(),
            "model": config.model,
            "trainer": config.effective_trainer(),
            "base_model_sha256": state_digest(&initial.base_state()),
            "initial_trainable_sha256": state_digest(&initial.trainable_state()),
        }),
    )?;
    let mut server = Server {
        config,
        fed,
        transport,
        store,
        log,
        sender: fed.manifest.owner().identity.clone(),
    };
    let mut global = initial.trainable_state();
    let result = (|| -> Result<Result<(), RunAbort>, OrchestratorError> {
        for round in 0..config.global_rounds {
            match server.train_round(round, &global, val.as_ref())? {
                Ok(record) => {
                    report.rounds.push(record.summary());
                    global = record.state;
                }
                Err(abort) => return Ok(Err(abort)),
            }
        }
        let bytes = encode_state(&global);
        let key = content_key(&bytes);
        if let Err(e) = store.put(&key, &bytes) {
            return Ok(Err(RunAbort::Store { detail: e.to_string() }));
        }
        let digest = state_digest(&global);
        report.final_model_key = Some(key.clone());
        report.final_model_sha256 = Some(digest.clone());
        server.log.write(kinds::FINAL_MODEL, json!({ "key": key, "sha256": digest, "bytes": bytes.len() }))?;

        let payload = match server.share(&global) {
            Ok(p) => p,
            Err(abort) => return Ok(Err(abort)),
        };
        let rounds = config.global_rounds;
        let outcomes = server.fan_out("finalize", rounds, &json!({}), &payload)?;
        if let Err(abort) = Server::check_outcomes(rounds, &outcomes) {
            return Ok(Err(abort));
        }
        for (endpoint, outcome) in &outcomes {
            if let Outcome::Done(r) = outcome {
                if r.metrics["sha256"] != json!(digest) {
                    return Ok(Err(RunAbort::ClientFailed {
                        round: rounds,
                        endpoint: endpoint.clone(),
                        detail: "final model digest differs from the server's".into(),
                    }));
                }
                report.distributed_to.push(endpoint.clone());
            }
        }

        let eval_config = serde_json::to_value(EvalTaskConfig {
            model: config.model.clone(),
            split: Split::Train,
        })
        .expect("eval config serializes");
        let outcomes = server.fan_out("evaluate", rounds, &eval_config, &payload)?;
        if let Err(abort) = Server::check_outcomes(rounds, &outcomes) {
            return Ok(Err(abort));
        }
        for (endpoint, outcome) in outcomes {
            if let Outcome::Done(r) = outcome {
                if let Some(acc) = r.metrics["accuracy"].as_f64() {
                    report.client_accuracies.insert(endpoint, acc);
                }
            }
        }
        if let Some(val) = &val {
            report.val_accuracy = Some(accuracy_of(&config.model, &global, val)?);
        }
        server.log.write(
            kinds::EVALUATION,
            json!({ "val_accuracy": report.val_accuracy, "client_accuracies": report.client_accuracies }),
        )?;
        Ok(Ok(()))
    })()?;
    match result {
        Ok(()) => {
            report.final_state = Some(global);
            log.write(kinds::RUN_FINISHED, serde_json::to_value(&report).expect("report serializes"))?;
        }
        Err(abort) => {
            log::error!("run aborted: {abort}");
            report.aborted = Some(abort);
            log.write(kinds::RUN_ABORTED, serde_json::to_value(&report).expect("report serializes"))?;
        }
    }
    Ok(report)
}

/// Builds the runtime for one roster endpoint: its shard loader registered
/// under the manifest's dataloader name and the shared validation loader.
pub fn endpoint_runtime(
    config: &ExperimentConfig,
    fed: &ResolvedFederation,
    endpoint_id: &str,
    store: Arc<dyn ObjectStore>,
) -> Result<EndpointRuntime, OrchestratorError> {
    let spec = fed
        .loader_for(endpoint_id)
        .ok_or_else(|| OrchestratorError::Config(format!("endpoint {endpoint_id} is not on the roster")))?;
    let mut ep_config = EndpointConfig::for_record(&fed.manifest, endpoint_id)?;
    let mut registry = DataloaderRegistry::new();
    registry.register(&ep_config.dataloader, spec)?;
    if let Some(val) = &fed.validation {
        let name = format!("{}.val", ep_config.dataloader);
        registry.register(&name, val)?;
        ep_config.val_dataloader = Some(name);
    }
    ep_config.inline_threshold = config.inline_threshold;
    Ok(EndpointRuntime::new(fed.manifest.clone(), ep_config, registry, store)?)
}

/// A simulated run and what each endpoint ended up holding.
pub struct Simulation {
    pub report: RunReport,
    pub endpoint_models: BTreeMap<String, Option<ModelState>>,
    pub endpoint_loads: BTreeMap<String, usize>,
}

/// Hosts every endpoint on its own thread behind the in-process transport.
pub fn simulate(
    config: &ExperimentConfig,
    fed: &ResolvedFederation,
    store: Arc<dyn ObjectStore>,
    log: &mut RunLog,
) -> Result<Simulation, OrchestratorError> {
    let transport = InProcTransport::new();
    let mut workers = Vec::new();
    let mut finals = BTreeMap::new();
    for endpoint in &fed.roster {
        let mut runtime = endpoint_runtime(config, fed, endpoint, Arc::clone(&store))?;
        finals.insert(endpoint.clone(), runtime.final_state_handle());
        let mut link = transport.register(endpoint.clone());
        let id = endpoint.clone();
        let loads = runtime.load_counter();
        let handle = thread::Builder::new()
            .name(format!("endpoint-{id}"))
            .spawn(move || run_endpoint(&mut runtime, &mut link))
            .map_err(|e| OrchestratorError::Io(e.to_string()))?;
        workers.push((id, handle, loads));
    }
    let report = run_federated(config, fed, &transport, store.as_ref(), log);
    transport.shutdown();
    let mut endpoint_loads = BTreeMap::new();
    for (id, handle, loads) in workers {
        match handle.join() {
            Ok(Ok(_)) => {}
            Ok(Err(e)) => log::warn!("endpoint {id} stopped with {e}"),
            Err(_) => log::error!("endpoint {id} panicked"),
        }
        endpoint_loads.insert(id, loads.load(Ordering::SeqCst));
    }
    let endpoint_models = finals
        .into_iter()
        .map(|(id, slot)| (id, slot.lock().expect("final state lock").clone()))
        .collect();
    Ok(Simulation {
        report: report?,
        endpoint_models,
        endpoint_loads,
    })
}

/// Waits for every roster endpoint to connect to `server`, then runs.
pub fn run_over_tcp(
    config: &ExperimentConfig,
    fed: &ResolvedFederation,
    server: &TcpServer,
    store: &dyn ObjectStore,
    log: &mut RunLog,
    connect_timeout: Duration,
) -> Result<RunReport, OrchestratorError> {
    server.expect_endpoints(fed.roster.iter().cloned());
    if let Err(e) = server.wait_for_endpoints(&fed.roster, connect_timeout) {
        let connected: BTreeSet<String> = server.connected().into_iter().collect();
        let missing: Vec<String> = fed.roster.iter().filter(|id| !connected.contains(*id)).cloned().collect();
        log::error!("endpoints never connected: {missing:?} ({e})");
        let mut report = RunReport::new(config, fed, server.name());
        report.aborted = Some(match missing.first() {
            Some(first) => RunAbort::EndpointUnreachable { endpoint: first.clone() },
            None => RunAbort::Store { detail: e.to_string() },
        });
        log.write(kinds::RUN_ABORTED, serde_json::to_value(&report).expect("report serializes"))?;
        return Ok(report);
    }
    run_federated(config, fed, server, store, log)
}
