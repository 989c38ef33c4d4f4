use std::collections::BTreeSet;
use std::sync::Arc;
use std::thread;

use fedsilo_core::adapters::AdapterSpec;
use fedsilo_core::codec::{decode_state, encode_state};
use fedsilo_core::comm::{InProcTransport, MemoryStore, ObjectStore};
use fedsilo_core::federation::{load_dataset, run_endpoint, LoaderSpec};
use fedsilo_core::orchestrator::{
    endpoint_runtime, kinds, render_table, run_baselines, run_federated, simulate, summarize_log, ExperimentConfig,
    RunAbort, RunLog,
};
use fedsilo_core::trainer::{local_train, ModelSpec, ToyModel, TrainerConfig};

fn config(n_clients: usize, rounds: u32) -> ExperimentConfig {
    let model = ModelSpec::linear(8, 5)
        .with_adapter(AdapterSpec::new(2, 4.0, vec!["linear.weight".into()]).unwrap())
        .with_seed(9);
    let mut cfg = ExperimentConfig::new(model, "synthetic:blobs?classes=5&n=300&dim=8&spread=1.5&seed=4");
    cfg.global_rounds = rounds;
    cfg.partition.n_clients = n_clients;
    cfg.partition.seed = 2;
    cfg.trainer = TrainerConfig {
        learning_rate: 0.05,
        batch_size: 8,
        seed: 5,
        ..TrainerConfig::default()
    };
    cfg
}

fn store() -> Arc<dyn ObjectStore> {
    Arc::new(MemoryStore::new())
}

#[test]
fn single_client_single_round_is_plain_local_training() {
    let cfg = config(1, 1);
    let fed = cfg.resolve().unwrap();
    let sim = simulate(&cfg, &fed, store(), &mut RunLog::in_memory()).unwrap();
    assert!(!sim.report.is_aborted(), "{:?}", sim.report.aborted);

    let shard = load_dataset(&LoaderSpec::parse(&fed.loaders[0]).unwrap()).unwrap();
    let model = ToyModel::init(&cfg.model).unwrap();
    let (expected, _) = local_train(&model, &shard, &cfg.effective_trainer(), 0).unwrap();
    assert_eq!(
        encode_state(sim.report.final_state.as_ref().unwrap()),
        encode_state(&expected)
    );
}

#[test]
fn four_clients_five_rounds() {
    let cfg = config(4, 5);
    let fed = cfg.resolve().unwrap();
    let st = store();
    let mut log = RunLog::in_memory();
    let sim = simulate(&cfg, &fed, Arc::clone(&st), &mut log).unwrap();
    let report = &sim.report;
    assert!(!report.is_aborted());
    assert_eq!(report.rounds.len(), 5);
    let bytes = st.get(report.final_model_key.as_ref().unwrap()).unwrap();
    let final_state = decode_state(&bytes).unwrap();
    assert_eq!(&final_state, report.final_state.as_ref().unwrap());
    assert_eq!(report.client_accuracies.len(), 4);
    // Five classes: chance is 0.2.
    assert!(report.val_accuracy.unwrap() > 0.3, "{:?}", report.val_accuracy);

    // Every client holds the server's final model.
    assert_eq!(report.distributed_to.len(), 4);
    for (id, model) in &sim.endpoint_models {
        assert_eq!(model.as_ref(), Some(&final_state), "endpoint {id}");
    }
    // Each endpoint loaded its shard once and the validation split never.
    assert!(sim.endpoint_loads.values().all(|&n| n == 1));

    // Barrier totality: each round record names the whole roster exactly once.
    let roster: BTreeSet<&str> = fed.roster.iter().map(String::as_str).collect();
    let rounds: Vec<_> = log.of_kind(kinds::ROUND_COMPLETED).collect();
    assert_eq!(rounds.len(), 5);
    for r in &rounds {
        let clients: Vec<&str> = r.payload["clients"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c.as_str().unwrap())
            .collect();
        assert_eq!(clients.len(), roster.len());
        assert_eq!(clients.iter().copied().collect::<BTreeSet<_>>(), roster);
    }

    // Log completeness: every dispatched task reaches a terminal status.
    let dispatched: BTreeSet<&str> = log
        .of_kind(kinds::TASK_DISPATCHED)
        .map(|r| r.payload["task_id"].as_str().unwrap())
        .collect();
    let finished: BTreeSet<&str> = log
        .of_kind(kinds::TASK_FINISHED)
        .map(|r| r.payload["task_id"].as_str().unwrap())
        .collect();
    assert_eq!(dispatched.len(), 4 * 5 + 4 + 4);
    assert_eq!(dispatched, finished);
    assert!(log
        .of_kind(kinds::TASK_FINISHED)
        .all(|r| r.payload["status"] == "ok"));

    let summary = summarize_log(log.records()).unwrap();
    assert_eq!(summary.rounds_completed, 5);
    assert!(summary.unfinished.is_empty());
    assert!(summary.aborted.is_none());
}

#[test]
fn reruns_are_bit_identical() {
    let cfg = config(3, 3);
    let fed = cfg.resolve().unwrap();
    let run = || {
        let sim = simulate(&cfg, &fed, store(), &mut RunLog::in_memory()).unwrap();
        encode_state(sim.report.final_state.as_ref().unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn identical_shards_make_every_baseline_agree() {
    let mut cfg = config(3, 2);
    let shard = "synthetic:blobs?classes=5&n=120&dim=8&spread=1.5&seed=4".to_string();
    cfg.data.shards = vec![shard.clone(); 3];
    cfg.data.validation = Some("synthetic:blobs?classes=5&n=200&dim=8&spread=1.5&seed=4&split=val".into());
    let fed = cfg.resolve().unwrap();
    let baselines = run_baselines(&cfg, &fed).unwrap();
    let first = baselines.local_accuracies[0];
    assert!(baselines.local_accuracies.iter().all(|&a| (a - first).abs() < 1e-9));
    assert!((baselines.local_average - first).abs() < 1e-9);
    let sim = simulate(&cfg, &fed, store(), &mut RunLog::in_memory()).unwrap();
    assert!((sim.report.val_accuracy.unwrap() - first).abs() < 1e-9);
}

#[test]
fn silent_client_aborts_the_round() {
    let mut cfg = config(2, 2);
    cfg.round_timeout_secs = 1;
    let fed = cfg.resolve().unwrap();
    let st = store();
    let transport = InProcTransport::new();
    let mut runtime = endpoint_runtime(&cfg, &fed, &fed.roster[0], Arc::clone(&st)).unwrap();
    let mut link = transport.register(fed.roster[0].clone());
    let worker = thread::spawn(move || run_endpoint(&mut runtime, &mut link));
    let _silent = transport.register(fed.roster[1].clone());

    let mut log = RunLog::in_memory();
    let report = run_federated(&cfg, &fed, &transport, st.as_ref(), &mut log).unwrap();
    transport.shutdown();
    worker.join().unwrap().unwrap();

    assert_eq!(
        report.aborted,
        Some(RunAbort::RoundTimeout {
            round: 0,
            missing: vec![fed.roster[1].clone()]
        })
    );
    assert!(report.rounds.is_empty());
    assert_eq!(log.of_kind(kinds::ROUND_COMPLETED).count(), 0);
    assert_eq!(log.of_kind(kinds::RUN_ABORTED).count(), 1);
    let statuses: Vec<&str> = log
        .of_kind(kinds::TASK_FINISHED)
        .map(|r| r.payload["status"].as_str().unwrap())
        .collect();
    assert_eq!(statuses.len(), 2);
    assert!(statuses.contains(&"timeout"));

    let summary = summarize_log(log.records()).unwrap();
    let table = render_table(&[summary]);
    assert!(table.contains("aborted"), "{table}");
    assert!(table.contains(&fed.roster[1]), "{table}");
}

#[test]
fn missing_endpoint_is_unreachable() {
    let cfg = config(2, 1);
    let fed = cfg.resolve().unwrap();
    let transport = InProcTransport::new();
    let report = run_federated(&cfg, &fed, &transport, store().as_ref(), &mut RunLog::in_memory()).unwrap();
    assert_eq!(
        report.aborted,
        Some(RunAbort::EndpointUnreachable {
            endpoint: fed.roster[0].clone()
        })
    );
}

#[test]
fn large_states_travel_through_the_store() {
    let mut cfg = config(2, 2);
    cfg.inline_threshold = 64;
    let fed = cfg.resolve().unwrap();
    let mut log = RunLog::in_memory();
    let offloaded = simulate(&cfg, &fed, store(), &mut log).unwrap().report;
    assert!(log
        .of_kind(kinds::TASK_DISPATCHED)
        .filter(|r| r.payload["function"] == "local_train")
        .all(|r| r.payload["payload"]["type"] == "object_ref"));
    cfg.inline_threshold = 1 << 30;
    let inline = simulate(&cfg, &fed, store(), &mut RunLog::in_memory()).unwrap().report;
    assert_eq!(offloaded.final_model_sha256, inline.final_model_sha256);
}
