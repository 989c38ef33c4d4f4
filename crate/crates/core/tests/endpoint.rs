use std::sync::atomic::Ordering;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use fedsilo_core::adapters::AdapterSpec;
use fedsilo_core::codec::{decode_state, encode_state};
use fedsilo_core::comm::{
    make_payload, resolve_payload, FailureReason, InProcTransport, MemoryStore, ObjectStore, TaskEnvelope, TaskStatus,
    Transport,
};
use fedsilo_core::federation::{
    add_member, create_federation, issue_token, issue_token_at, register_endpoint, run_endpoint, sign_claims, unix_now,
    Claims, DataloaderRegistry, EndpointConfig, EndpointRuntime, FederationManifest, TaskOutput, TrainTaskConfig,
};
use fedsilo_core::taskdata::synth_from_str;
use fedsilo_core::trainer::{local_train, ModelSpec, ToyModel, TrainerConfig};
use serde_json::json;

const SHARD: &str = "synthetic:blobs?classes=4&n=200&dim=8&seed=11&shard=1/3&pseed=5";

struct Fixture {
    manifest: FederationManifest,
    endpoint_id: String,
    store: Arc<dyn ObjectStore>,
}

fn fixture() -> Fixture {
    let mut manifest = create_federation("server", "server@lab.org").unwrap();
    add_member(&mut manifest, "site-a", "a@hospital.org").unwrap();
    let rec = register_endpoint(&mut manifest, "site-a", "shard", "").unwrap();
    Fixture {
        manifest,
        endpoint_id: rec.endpoint_id,
        store: Arc::new(MemoryStore::new()),
    }
}

fn runtime(fx: &Fixture, spec: &str) -> EndpointRuntime {
    let mut reg = DataloaderRegistry::new();
    reg.register("shard", spec).unwrap();
    EndpointRuntime::new(
        fx.manifest.clone(),
        EndpointConfig::new(fx.endpoint_id.clone(), "shard"),
        reg,
        Arc::clone(&fx.store),
    )
    .unwrap()
}

fn train_config() -> TrainTaskConfig {
    TrainTaskConfig {
        model: ModelSpec::linear(8, 4).with_adapter(AdapterSpec::new(2, 4.0, vec!["linear.weight".into()]).unwrap()),
        trainer: TrainerConfig {
            learning_rate: 0.05,
            batch_size: 8,
            seed: 3,
            ..TrainerConfig::default()
        },
    }
}

fn signed_task(manifest: &FederationManifest, function: &str, round: u32) -> TaskEnvelope {
    let mut task = TaskEnvelope::new(function, round, "server");
    task.auth_token = issue_token(manifest, "server", &task.task_id, round, 60).unwrap();
    task
}

#[test]
fn train_task_matches_direct_local_train() {
    let fx = fixture();
    let mut rt = runtime(&fx, SHARD);
    let cfg = train_config();
    let model = ToyModel::init(&cfg.model).unwrap();
    let mut task = signed_task(&fx.manifest, "local_train", 2);
    task.config = serde_json::to_value(&cfg).unwrap();
    task.payload = make_payload(encode_state(&model.trainable_state()), fx.store.as_ref(), 1 << 20).unwrap();

    let result = rt.handle(&task);
    assert_eq!(result.status, TaskStatus::Ok, "{result:?}");
    let got = decode_state(&resolve_payload(&result.payload, fx.store.as_ref()).unwrap()).unwrap();

    let shard = synth_from_str(SHARD.split("&shard").next().unwrap()).unwrap();
    let plan = fedsilo_core::partition::client_shard(
        shard.labels(),
        &fedsilo_core::partition::PartitionConfig::new(3, 2.0, 8.0, 5),
        1,
    )
    .unwrap();
    let (expected, metrics) = local_train(&model, &shard.subset(&plan), &cfg.trainer, 2).unwrap();
    assert_eq!(encode_state(&got), encode_state(&expected));
    assert!(got.same_signature(&model.trainable_state()));
    assert_eq!(result.metrics["n_samples"], json!(metrics.n_samples));
}

#[test]
fn every_token_defect_is_rejected_before_data_is_touched() {
    let fx = fixture();
    let mut rt = runtime(&fx, SHARD);
    let now = unix_now();
    let mut defects: Vec<(&str, TaskEnvelope)> = Vec::new();

    let other = create_federation("server", "server@lab.org").unwrap();
    let mut t = TaskEnvelope::new("local_train", 0, "server");
    t.auth_token = issue_token(&other, "server", &t.task_id, 0, 60).unwrap();
    defects.push(("bad signature", t));

    let claims = |t: &TaskEnvelope| Claims {
        expiry: now + 60,
        group_id: fx.manifest.group_id.clone(),
        round: 0,
        sender: "server".into(),
        task_id: t.task_id.clone(),
    };
    let mut t = TaskEnvelope::new("local_train", 0, "server");
    t.auth_token = sign_claims(fx.manifest.secret(), &Claims { group_id: other.group_id.clone(), ..claims(&t) });
    defects.push(("wrong group", t));

    let mut t = TaskEnvelope::new("local_train", 0, "mallory");
    t.auth_token = sign_claims(fx.manifest.secret(), &Claims { sender: "mallory".into(), ..claims(&t) });
    defects.push(("unknown sender", t));

    let mut t = TaskEnvelope::new("local_train", 0, "server");
    t.auth_token = issue_token(&fx.manifest, "server", "some-other-task", 0, 60).unwrap();
    defects.push(("task mismatch", t));

    let mut t = TaskEnvelope::new("local_train", 0, "server");
    t.auth_token = issue_token_at(&fx.manifest, "server", &t.task_id, 0, 0, now - 120).unwrap();
    defects.push(("expired", t));

    let mut t = signed_task(&fx.manifest, "local_train", 0);
    t.auth_token.replace_range(0..1, if t.auth_token.starts_with('e') { "f" } else { "e" });
    defects.push(("corrupted", t));

    let mut t = signed_task(&fx.manifest, "local_train", 0);
    t.round = 1;
    defects.push(("round altered", t));

    for (name, mut task) in defects {
        task.config = serde_json::to_value(train_config()).unwrap();
        let result = rt.handle(&task);
        assert!(
            matches!(result.failure(), Some(FailureReason::AuthRejected(_))),
            "{name}: {result:?}"
        );
    }
    assert_eq!(rt.load_count(), 0);

    // A correct token does reach the data.
    let mut task = signed_task(&fx.manifest, "local_train", 0);
    task.config = serde_json::to_value(train_config()).unwrap();
    assert_eq!(rt.handle(&task).status, TaskStatus::Ok);
    assert_eq!(rt.load_count(), 1);
}

#[test]
fn skew_tolerance_at_the_endpoint() {
    let fx = fixture();
    let mut rt = runtime(&fx, SHARD);
    let mut task = signed_task(&fx.manifest, "evaluate", 0);
    task.auth_token = issue_token_at(&fx.manifest, "server", &task.task_id, 0, 0, unix_now() - 5).unwrap();
    task.config = json!({ "model": train_config().model });
    assert_eq!(rt.handle(&task).status, TaskStatus::Ok);
}

#[test]
fn unknown_function_and_broken_loader() {
    let fx = fixture();
    let mut rt = runtime(&fx, SHARD);
    let result = rt.handle(&signed_task(&fx.manifest, "nonexistent", 0));
    assert_eq!(
        result.failure(),
        Some(&FailureReason::UnknownFunction("nonexistent".into()))
    );

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("site.csv");
    std::fs::write(&path, "a,b\n1,2\n").unwrap();
    let mut rt = runtime(&fx, &format!("csv:{}?label=y", path.display()));
    let mut task = signed_task(&fx.manifest, "local_train", 0);
    task.config = serde_json::to_value(train_config()).unwrap();
    assert!(matches!(rt.handle(&task).failure(), Some(FailureReason::DataloaderError(_))));

    let mut task = signed_task(&fx.manifest, "local_train", 0);
    task.config = json!({ "nonsense": true });
    let mut rt = runtime(&fx, SHARD);
    assert!(matches!(rt.handle(&task).failure(), Some(FailureReason::ExecutionError(_))));
}

#[test]
fn raw_samples_never_leave_the_endpoint() {
    const SENTINEL: f64 = 7_777.125;
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("private.csv");
    let mut csv = String::from("f0,f1,f2,f3,f4,f5,f6,f7,label\n");
    for i in 0..60 {
        let row: Vec<String> = (0..8)
            .map(|j| if j == i % 8 { SENTINEL.to_string() } else { format!("{}", (i * j) as f64 * 0.01) })
            .collect();
        csv.push_str(&format!("{},{}\n", row.join(","), i % 4));
    }
    std::fs::write(&path, csv).unwrap();
    let mut rt = runtime(&fx, &format!("csv:{}?label=label&classes=4", path.display()));

    let mut payloads: Vec<Vec<u8>> = Vec::new();
    let cfg = train_config();
    let mut state = encode_state(&ToyModel::init(&cfg.model).unwrap().trainable_state());
    for round in 0..3 {
        let mut task = signed_task(&fx.manifest, "local_train", round);
        task.config = serde_json::to_value(&cfg).unwrap();
        task.payload = make_payload(state.clone(), fx.store.as_ref(), 1 << 20).unwrap();
        let result = rt.handle(&task);
        assert_eq!(result.status, TaskStatus::Ok);
        state = resolve_payload(&result.payload, fx.store.as_ref()).unwrap();
        payloads.push(state.clone());
        payloads.push(serde_json::to_vec(&result).unwrap());
    }
    let mut eval = signed_task(&fx.manifest, "evaluate", 0);
    eval.config = json!({ "model": cfg.model });
    eval.payload = make_payload(state, fx.store.as_ref(), 1 << 20).unwrap();
    payloads.push(serde_json::to_vec(&rt.handle(&eval)).unwrap());

    let needles: Vec<Vec<u8>> = vec![
        (SENTINEL as f32).to_le_bytes().to_vec(),
        SENTINEL.to_le_bytes().to_vec(),
        SENTINEL.to_string().into_bytes(),
        b"7777".to_vec(),
    ];
    for bytes in &payloads {
        for needle in &needles {
            assert!(
                !bytes.windows(needle.len()).any(|w| w == needle.as_slice()),
                "sentinel {needle:?} leaked"
            );
        }
    }
}

#[test]
fn overlapping_tasks_run_one_at_a_time() {
    let fx = fixture();
    let mut rt = runtime(&fx, SHARD);
    let spans: Arc<Mutex<Vec<(Instant, Instant)>>> = Arc::default();
    let recorded = Arc::clone(&spans);
    rt.register_function(
        "sleep",
        Box::new(move |_task, _payload, _data| {
            let start = Instant::now();
            thread::sleep(Duration::from_millis(60));
            recorded.lock().unwrap().push((start, Instant::now()));
            Ok(TaskOutput {
                payload: Vec::new(),
                metrics: json!({}),
            })
        }),
    );
    let transport = InProcTransport::new();
    let mut link = transport.register(fx.endpoint_id.clone());
    let worker = thread::spawn(move || run_endpoint(&mut rt, &mut link).unwrap());
    let pending: Vec<_> = (0..4)
        .map(|_| {
            transport
                .dispatch(&fx.endpoint_id, signed_task(&fx.manifest, "sleep", 0))
                .unwrap()
        })
        .collect();
    for p in &pending {
        assert_eq!(p.wait(Duration::from_secs(5)).unwrap().status, TaskStatus::Ok);
    }
    transport.shutdown();
    assert_eq!(worker.join().unwrap(), 4);
    let mut spans = spans.lock().unwrap().clone();
    spans.sort();
    assert_eq!(spans.len(), 4);
    for pair in spans.windows(2) {
        assert!(pair[0].1 <= pair[1].0, "tasks overlapped");
    }
}

#[test]
fn finalize_keeps_the_delivered_model() {
    let fx = fixture();
    let mut rt = runtime(&fx, SHARD);
    let handle = rt.final_state_handle();
    let state = ToyModel::init(&train_config().model).unwrap().trainable_state();
    let mut task = signed_task(&fx.manifest, "finalize", 5);
    task.payload = make_payload(encode_state(&state), fx.store.as_ref(), 16).unwrap();
    assert!(!task.payload.is_inline());
    let result = rt.handle(&task);
    assert_eq!(result.status, TaskStatus::Ok);
    assert_eq!(handle.lock().unwrap().as_ref(), Some(&state));
    assert_eq!(rt.final_state(), Some(state));
    assert_eq!(rt.load_count(), 0);
}

#[test]
fn loader_counter_is_shared() {
    let mut reg = DataloaderRegistry::new();
    reg.register("x", "synthetic:blobs?classes=2&n=10").unwrap();
    let counter = reg.load_counter();
    reg.load("x").unwrap();
    assert_eq!(counter.load(Ordering::SeqCst), 1);
}
