//! The client-side service loop: verify, resolve, execute, reply.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::AtomicUsize;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::loader::DataloaderRegistry;
use super::manifest::FederationManifest;
use super::token::{unix_now, verify_token_at};
use super::FederationError;
use crate::codec::{decode_state, encode_state, state_digest};
use crate::comm::{
    make_payload, resolve_payload, CommError, EndpointLink, FailureReason, ObjectStore, ResultEnvelope, TaskEnvelope,
    DEFAULT_INLINE_THRESHOLD,
};
use crate::taskdata::{Dataset, Split};
use crate::tensor::ModelState;
use crate::trainer::{evaluate, local_train, ModelSpec, ToyModel, TrainerConfig};

/// Expiry tolerance applied by endpoints when checking task tokens.
pub const CLOCK_SKEW_SECS: i64 = 30;

#[derive(Debug, Clone)]
pub struct EndpointConfig {
    pub endpoint_id: String,
    /// Loader for the training shard; defaults to the manifest record's name.
    pub dataloader: String,
    pub val_dataloader: Option<String>,
    pub inline_threshold: usize,
    pub clock_skew_secs: i64,
    /// Where `finalize` writes the received model, if anywhere.
    pub output_dir: Option<PathBuf>,
}

impl EndpointConfig {
    pub fn new(endpoint_id: impl Into<String>, dataloader: impl Into<String>) -> Self {
        Self {
            endpoint_id: endpoint_id.into(),
            dataloader: dataloader.into(),
            val_dataloader: None,
            inline_threshold: DEFAULT_INLINE_THRESHOLD,
            clock_skew_secs: CLOCK_SKEW_SECS,
            output_dir: None,
        }
    }

    /// Config for a manifest endpoint, using its registered dataloader name.
    pub fn for_record(manifest: &FederationManifest, endpoint_id: &str) -> Result<Self, FederationError> {
        let record = manifest
            .endpoint(endpoint_id)
            .ok_or_else(|| FederationError::InvalidManifest(format!("no endpoint {endpoint_id}")))?;
        Ok(Self::new(endpoint_id, record.dataloader_name.clone()))
    }
}

/// Config carried by `local_train` tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTaskConfig {
    pub model: ModelSpec,
    pub trainer: TrainerConfig,
}

/// Config carried by `evaluate` tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTaskConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub split: Split,
}

pub struct TaskOutput {
    pub payload: Vec<u8>,
    pub metrics: Value,
}

/// Lazy access to the endpoint's local data. Nothing is loaded until a
/// function asks for it.
pub struct DataAccess<'a> {
    registry: &'a DataloaderRegistry,
    train: &'a str,
    val: Option<&'a str>,
    cache: &'a mut BTreeMap<String, Arc<Dataset>>,
}

impl DataAccess<'_> {
    fn load(&mut self, name: &str) -> Result<Arc<Dataset>, FailureReason> {
        if let Some(d) = self.cache.get(name) {
            return Ok(Arc::clone(d));
        }
        let data = Arc::new(
            self.registry
                .load(name)
                .map_err(|e| FailureReason::DataloaderError(e.to_string()))?,
        );
        self.cache.insert(name.to_string(), Arc::clone(&data));
        Ok(data)
    }

    pub fn train(&mut self) -> Result<Arc<Dataset>, FailureReason> {
        let name = self.train;
        self.load(name)
    }

    pub fn val(&mut self) -> Result<Arc<Dataset>, FailureReason> {
        let name = self
            .val
            .ok_or_else(|| FailureReason::DataloaderError("no validation dataloader registered".into()))?;
        self.load(name)
    }

    pub fn split(&mut self, split: Split) -> Result<Arc<Dataset>, FailureReason> {
        match split {
            Split::Train => self.train(),
            Split::Val => self.val(),
        }
    }
}

pub type TaskFn = Box<dyn Fn(&TaskEnvelope, &[u8], &mut DataAccess<'_>) -> Result<TaskOutput, FailureReason> + Send>;

fn exec_err(e: impl std::fmt::Display) -> FailureReason {
    FailureReason::ExecutionError(e.to_string())
}

fn parse_config<T: for<'de> Deserialize<'de>>(task: &TaskEnvelope) -> Result<T, FailureReason> {
    serde_json::from_value(task.config.clone()).map_err(|e| exec_err(format!("bad task config: {e}")))
}

/// The model described by `spec` carrying the trainable state in `payload`
/// (or its initial one when the payload is empty).
fn model_with(spec: &ModelSpec, payload: &[u8]) -> Result<ToyModel, FailureReason> {
    let model = ToyModel::init(spec).map_err(exec_err)?;
    if payload.is_empty() {
        return Ok(model);
    }
    let state = decode_state(payload).map_err(exec_err)?;
    model.with_trainable(&state).map_err(exec_err)
}

fn local_train_fn() -> TaskFn {
    Box::new(|task, payload, data| {
        let cfg: TrainTaskConfig = parse_config(task)?;
        let model = model_with(&cfg.model, payload)?;
        let shard = data.train()?;
        let (state, metrics) = local_train(&model, &shard, &cfg.trainer, task.round).map_err(exec_err)?;
        Ok(TaskOutput {
            payload: encode_state(&state),
            metrics: serde_json::to_value(metrics).map_err(exec_err)?,
        })
    })
}

fn evaluate_fn() -> TaskFn {
    Box::new(|task, payload, data| {
        let cfg: EvalTaskConfig = parse_config(task)?;
        let model = model_with(&cfg.model, payload)?;
        let split = data.split(cfg.split)?;
        let accuracy = evaluate(&model, &split).map_err(exec_err)?;
        Ok(TaskOutput {
            payload: Vec::new(),
            metrics: json!({ "accuracy": accuracy, "n_samples": split.len() }),
        })
    })
}

fn finalize_fn(endpoint_id: String, output_dir: Option<PathBuf>, slot: Arc<Mutex<Option<ModelState>>>) -> TaskFn {
    Box::new(move |_task, payload, _data| {
        let state = decode_state(payload).map_err(exec_err)?;
        let digest = state_digest(&state);
        let mut key = Value::Null;
        if let Some(dir) = &output_dir {
            fs::create_dir_all(dir).map_err(exec_err)?;
            let path = dir.join(format!("{endpoint_id}.final.apfl"));
            fs::write(&path, payload).map_err(exec_err)?;
            key = json!(path.display().to_string());
        }
        *slot.lock().expect("final state lock") = Some(state);
        Ok(TaskOutput {
            payload: Vec::new(),
            metrics: json!({ "sha256": digest, "path": key }),
        })
    })
}

/// One endpoint: a manifest view, its dataloaders and a function table.
pub struct EndpointRuntime {
    manifest: FederationManifest,
    config: EndpointConfig,
    registry: DataloaderRegistry,
    store: Arc<dyn ObjectStore>,
    functions: BTreeMap<String, TaskFn>,
    cache: BTreeMap<String, Arc<Dataset>>,
    final_state: Arc<Mutex<Option<ModelState>>>,
}

impl EndpointRuntime {
    /// Builds a runtime with `local_train`, `evaluate` and `finalize`
    /// registered.
    pub fn new(
        manifest: FederationManifest,
        config: EndpointConfig,
        registry: DataloaderRegistry,
        store: Arc<dyn ObjectStore>,
    ) -> Result<Self, FederationError> {
        if manifest.endpoint(&config.endpoint_id).is_none() {
            return Err(FederationError::InvalidManifest(format!(
                "endpoint {} is not registered in group {}",
                config.endpoint_id, manifest.group_id
            )));
        }
        for name in std::iter::once(&config.dataloader).chain(config.val_dataloader.iter()) {
            if !registry.contains(name) {
                return Err(FederationError::InvalidManifest(format!("no dataloader registered as {name:?}")));
            }
        }
        let final_state = Arc::new(Mutex::new(None));
        let mut rt = Self {
            functions: BTreeMap::new(),
            cache: BTreeMap::new(),
            final_state: Arc::clone(&final_state),
            manifest,
            registry,
            store,
            config,
        };
        rt.register_function("local_train", local_train_fn());
        rt.register_function("evaluate", evaluate_fn());
        let finalize = finalize_fn(rt.config.endpoint_id.clone(), rt.config.output_dir.clone(), final_state);
        rt.register_function("finalize", finalize);
        Ok(rt)
    }

    pub fn endpoint_id(&self) -> &str {
        &self.config.endpoint_id
    }

    /// Adds or replaces a function.
    pub fn register_function(&mut self, name: &str, f: TaskFn) {
        self.functions.insert(name.to_string(), f);
    }

    pub fn functions(&self) -> impl Iterator<Item = &str> {
        self.functions.keys().map(String::as_str)
    }

    pub fn load_count(&self) -> usize {
        self.registry.load_count()
    }

    pub fn load_counter(&self) -> Arc<AtomicUsize> {
        self.registry.load_counter()
    }

    /// The model delivered by the last `finalize` task.
    pub fn final_state(&self) -> Option<ModelState> {
        self.final_state.lock().expect("final state lock").clone()
    }

    pub fn final_state_handle(&self) -> Arc<Mutex<Option<ModelState>>> {
        Arc::clone(&self.final_state)
    }

    fn authorize(&self, task: &TaskEnvelope) -> Result<(), FailureReason> {
        let claims = verify_token_at(
            &self.manifest,
            &task.auth_token,
            &task.task_id,
            unix_now(),
            self.config.clock_skew_secs,
        )
        .map_err(|r| FailureReason::AuthRejected(r.to_string()))?;
        if claims.sender != task.sender || claims.round != task.round {
            return Err(FailureReason::AuthRejected("token does not match the envelope".into()));
        }
        Ok(())
    }

    fn execute(&mut self, task: &TaskEnvelope) -> Result<ResultEnvelope, FailureReason> {
        self.authorize(task)?;
        let f = self
            .functions
            .get(&task.function)
            .ok_or_else(|| FailureReason::UnknownFunction(task.function.clone()))?;
        let payload = resolve_payload(&task.payload, self.store.as_ref()).map_err(exec_err)?;
        let mut access = DataAccess {
            registry: &self.registry,
            train: &self.config.dataloader,
            val: self.config.val_dataloader.as_deref(),
            cache: &mut self.cache,
        };
        let out = f(task, &payload, &mut access)?;
        let payload = make_payload(out.payload, self.store.as_ref(), self.config.inline_threshold).map_err(exec_err)?;
        Ok(ResultEnvelope::ok(
            task.task_id.clone(),
            self.config.endpoint_id.clone(),
            payload,
            out.metrics,
        ))
    }

    /// Runs one task to a result. Failures are reported in the envelope.
    pub fn handle(&mut self, task: &TaskEnvelope) -> ResultEnvelope {
        match self.execute(task) {
            Ok(r) => r,
            Err(reason) => {
                log::warn!("{}: task {} ({}) failed: {reason}", self.config.endpoint_id, task.task_id, task.function);
                ResultEnvelope::failed(task.task_id.clone(), self.config.endpoint_id.clone(), reason)
            }
        }
    }
}

/// Serves tasks from `link` one at a time until the server goes away.
/// Returns the number of tasks handled.
pub fn run_endpoint(runtime: &mut EndpointRuntime, link: &mut dyn EndpointLink) -> Result<usize, CommError> {
    let mut handled = 0;
    while let Some(task) = link.recv()? {
        log::debug!("{}: {} round {} ({})", runtime.endpoint_id(), task.function, task.round, task.task_id);
        let result = runtime.handle(&task);
        link.send(result)?;
        handled += 1;
    }
    Ok(handled)
}
