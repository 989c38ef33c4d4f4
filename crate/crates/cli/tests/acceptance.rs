//! Acceptance gate. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line each and exits nonzero if any failed.

use std::collections::BTreeMap;
use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use fedsilo_core::adapters::{format_mib, trainable_bytes, AdapterSpec, ArchitectureProfile};
use fedsilo_core::aggregator::{fedavg, ClientUpdate};
use fedsilo_core::codec::{decode_state, encode_state};
use fedsilo_core::comm::{
    decode_frame, encode_frame, FailureReason, Frame, MemoryStore, PayloadRef, ResultEnvelope, TaskEnvelope,
};
use fedsilo_core::federation::{
    add_member, create_federation, issue_token, issue_token_at, register_endpoint, sign_claims, unix_now, Claims,
    DataloaderRegistry, EndpointConfig, EndpointRuntime, TrainTaskConfig,
};
use fedsilo_core::orchestrator::{kinds, run_baselines, simulate, ExperimentConfig, RunLog};
use fedsilo_core::partition::{dual_dirichlet_partition, partition_report, PartitionConfig};
use fedsilo_core::taskdata::{format_prompt, profile_for, DatasetKind, PromptTemplate, ALPACA};
use fedsilo_core::tensor::{DType, ModelState, Tensor, TensorData};
use fedsilo_core::trainer::{BatchBudget, ModelKind, ModelSpec, ToyModel, TrainerConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed <= limit, || format!("took {elapsed:.1?}, limit {limit:?}"))
}

// 1. Adapter payload accounting on the 7B-shaped profile.
fn lora_accounting() -> Outcome {
    let spec = AdapterSpec::new(8, 16.0, vec!["q_proj".into(), "v_proj".into()]).map_err(|e| e.to_string())?;
    let arch = ArchitectureProfile::llama2_7b();
    let bytes = trainable_bytes(&spec, &arch);
    let expected: u64 = 32 * 2 * (8 * 4096 + 4096 * 8) * 4;
    ensure(expected == 16_777_216, || format!("oracle gives {expected}"))?;
    ensure(bytes == expected, || format!("{bytes} bytes, expected {expected}"))?;
    let shown = format_mib(bytes);
    ensure(shown == "16.0 MiB", || format!("formatted as {shown:?}"))?;
    let full = arch.full_model_bytes().ok_or("no full model size")?;
    ensure((bytes as f64) < 0.01 * full as f64, || format!("{bytes} is not under 1% of {full}"))?;
    Ok(format!("{bytes} bytes = {shown}"))
}

// 2. FedAvg against a brute-force weighted mean.
fn brute_force_mean(updates: &[ClientUpdate]) -> Vec<Vec<f64>> {
    let total: f64 = updates.iter().map(|u| u.n_samples as f64).sum();
    updates[0]
        .state
        .iter()
        .map(|(name, t)| {
            (0..t.numel())
                .map(|i| {
                    let mut s = 0.0;
                    for u in updates {
                        s += u.n_samples as f64 * u.state.get(name).unwrap().to_f64_vec()[i];
                    }
                    s / total
                })
                .collect()
        })
        .collect()
}

fn random_updates(rng: &mut ChaCha8Rng) -> Vec<ClientUpdate> {
    let clients = rng.random_range(1..=5);
    let sizes: Vec<usize> = (0..rng.random_range(1..=4)).map(|_| rng.random_range(1..=64)).collect();
    (0..clients)
        .map(|c| {
            let mut state = ModelState::new();
            for (t, &len) in sizes.iter().enumerate() {
                let values = (0..len).map(|_| rng.random_range(-10.0..10.0)).collect();
                state.insert(format!("w{t}"), Tensor::from_f64(vec![len], values).unwrap()).unwrap();
            }
            ClientUpdate::new(format!("c{c}"), 0, state, rng.random_range(1..500))
        })
        .collect()
}

fn fedavg_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for set in 0..200 {
        let updates = random_updates(&mut rng);
        let got = fedavg(&updates).map_err(|e| e.to_string())?;
        let oracle = brute_force_mean(&updates);
        for ((name, t), want) in got.iter().zip(&oracle) {
            for (i, (g, w)) in t.to_f64_vec().iter().zip(want).enumerate() {
                worst = worst.max((g - w).abs());
                ensure((g - w).abs() <= 1e-12, || format!("set {set} {name}[{i}]: {g} vs {w}"))?;
                let column = updates.iter().map(|u| u.state.get(name).unwrap().to_f64_vec()[i]);
                let (lo, hi) = column.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
                ensure(lo <= *g && *g <= hi, || format!("set {set} {name}[{i}] outside the hull"))?;
            }
        }
        let mut shuffled = updates.clone();
        shuffled.shuffle(&mut rng);
        ensure(fedavg(&shuffled).unwrap() == got, || format!("set {set}: order changed the result"))?;
        let k = rng.random_range(2..50);
        let scaled: Vec<ClientUpdate> = updates
            .iter()
            .map(|u| ClientUpdate::new(u.client_id.clone(), 0, u.state.clone(), u.n_samples * k))
            .collect();
        ensure(fedavg(&scaled).unwrap() == got, || format!("set {set}: scaling weights by {k} changed the result"))?;
    }
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!("200 sets, max abs error {worst:.1e}"))
}

// 3. Dual-Dirichlet size and skew statistics.
fn partition_statistics() -> Outcome {
    let start = Instant::now();
    let labels: Vec<usize> = (0..4000).map(|i| i % 10).collect();
    let mut fractions = Vec::new();
    for seed in 0..1000 {
        let plan = dual_dirichlet_partition(&labels, &PartitionConfig::new(4, 2.0, 8.0, seed)).map_err(|e| e.to_string())?;
        let mut all: Vec<usize> = plan.assignments.iter().flatten().copied().collect();
        all.sort_unstable();
        ensure(all.iter().copied().eq(0..labels.len()), || format!("seed {seed}: not an exact disjoint cover"))?;
        fractions.extend(plan.client_sizes().iter().map(|&s| s as f64 / labels.len() as f64));
    }
    let n = fractions.len() as f64;
    let mean = fractions.iter().sum::<f64>() / n;
    let var = fractions.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let closed_form = (3.0 / 16.0) / 33.0;
    ensure((mean - 0.25).abs() <= 0.02, || format!("mean fraction {mean}"))?;
    ensure((var / closed_form - 1.0).abs() <= 0.2, || format!("variance {var:.3e} vs {closed_form:.3e}"))?;

    let mut shares = Vec::new();
    for alpha1 in [0.1, 2.0, 100.0] {
        let mut sum = 0.0;
        let mut count = 0.0;
        for seed in 0..200 {
            let plan = dual_dirichlet_partition(&labels, &PartitionConfig::new(4, alpha1, 8.0, seed)).unwrap();
            for s in partition_report(&plan, &labels).unwrap().max_class_shares() {
                sum += s;
                count += 1.0;
            }
        }
        shares.push(sum / count);
    }
    ensure(shares[0] > shares[1] && shares[1] > shares[2], || format!("max-class shares {shares:?}"))?;
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "mean {mean:.4}, variance ratio {:.3}, max-class share {:.3} > {:.3} > {:.3}",
        var / closed_form,
        shares[0],
        shares[1],
        shares[2]
    ))
}

// 4. FL against local and pooled training over 20 seeds.
fn blobs_config(seed: u64) -> ExperimentConfig {
    let model = ModelSpec::linear(16, 10)
        .with_adapter(AdapterSpec::new(2, 4.0, vec!["linear.weight".into()]).unwrap())
        .with_seed(seed);
    let mut cfg = ExperimentConfig::new(
        model,
        format!("synthetic:blobs?classes=10&n=4000&dim=16&spread=2.0&seed={seed}"),
    );
    cfg.global_rounds = 5;
    cfg.partition = PartitionConfig::new(4, 2.0, 8.0, seed);
    cfg.seed = seed;
    cfg.trainer = TrainerConfig {
        learning_rate: 0.01,
        batch_size: 4,
        seed,
        ..TrainerConfig::default()
    };
    cfg
}

fn directional_pattern() -> Outcome {
    let start = Instant::now();
    let (mut beats_local, mut near_global) = (0, 0);
    for seed in 0..20 {
        let cfg = blobs_config(seed);
        let fed = cfg.resolve().map_err(|e| e.to_string())?;
        let sim = simulate(&cfg, &fed, Arc::new(MemoryStore::new()), &mut RunLog::in_memory()).map_err(|e| e.to_string())?;
        let fl = sim.report.val_accuracy.ok_or("no validation accuracy")?;
        let base = run_baselines(&cfg, &fed).map_err(|e| e.to_string())?;
        beats_local += usize::from(fl >= base.local_average);
        near_global += usize::from(base.global_accuracy >= fl - 0.05);
    }
    let detail = format!("FL >= local avg in {beats_local}/20, global >= FL - 0.05 in {near_global}/20");
    ensure(beats_local >= 18 && near_global >= 18, || detail.clone())?;
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(detail)
}

// 5. In-process simulation and TCP processes agree bit for bit.
fn fedsilo() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedsilo"));
    cmd.env("RUST_LOG", "error").stdout(Stdio::null()).stderr(Stdio::null());
    cmd
}

struct Reaper(Vec<Child>);

impl Drop for Reaper {
    fn drop(&mut self) {
        for c in &mut self.0 {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn write_json(path: &Path, value: &Value) {
    fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

fn transport_equivalence() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let base: Value = serde_json::from_str(&blobs_config(3).to_json()).unwrap();
    let config_for = |name: &str| -> PathBuf {
        let mut cfg = base.clone();
        cfg["name"] = json!(name);
        cfg["output_dir"] = json!(dir.path().join(name));
        cfg["listen"] = json!(format!("127.0.0.1:{port}"));
        let path = dir.path().join(format!("{name}.json"));
        write_json(&path, &cfg);
        path
    };
    let sim_cfg = config_for("sim");
    let status = fedsilo()
        .args(["run", "--simulate", "--config"])
        .arg(&sim_cfg)
        .status()
        .map_err(|e| e.to_string())?;
    ensure(status.success(), || format!("simulated run exited with {status}"))?;

    let tcp_cfg = config_for("tcp");
    let mut server = fedsilo()
        .args(["run", "--connect-timeout", "30", "--config"])
        .arg(&tcp_cfg)
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut endpoints = Reaper(Vec::new());
    for i in 0..4 {
        let child = fedsilo()
            .args(["endpoint", "--index", &i.to_string(), "--connect", &format!("127.0.0.1:{port}"), "--config"])
            .arg(&tcp_cfg)
            .spawn()
            .map_err(|e| e.to_string())?;
        endpoints.0.push(child);
    }
    let status = server.wait().map_err(|e| e.to_string())?;
    ensure(status.success(), || format!("TCP run exited with {status}"))?;
    for c in &mut endpoints.0 {
        let s = c.wait().map_err(|e| e.to_string())?;
        ensure(s.success(), || format!("an endpoint exited with {s}"))?;
    }
    let sim = fs::read(dir.path().join("sim/final_model.apfl")).map_err(|e| e.to_string())?;
    let tcp = fs::read(dir.path().join("tcp/final_model.apfl")).map_err(|e| e.to_string())?;
    ensure(sim == tcp, || "final models differ".into())?;
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!("4 TCP endpoint processes, {}-byte final models identical", sim.len()))
}

// 6. Large adapter states go through the object store.
fn payload_path_coverage() -> Outcome {
    let start = Instant::now();
    let adapter = AdapterSpec::new(128, 256.0, vec!["hidden.weight".into(), "output.weight".into()]).unwrap();
    let model = ModelSpec::mlp(256, 1024, 10).with_adapter(adapter).with_seed(4);
    let trainable = encode_state(&ToyModel::init(&model).map_err(|e| e.to_string())?.trainable_state()).len();
    ensure(trainable > 1 << 20, || format!("adapter state is only {trainable} bytes"))?;
    let mut cfg = ExperimentConfig::new(model, "synthetic:blobs?classes=10&n=240&dim=256&spread=2.0&seed=8");
    cfg.global_rounds = 2;
    cfg.partition = PartitionConfig::new(2, 2.0, 8.0, 1);
    cfg.trainer = TrainerConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        batches_per_round: BatchBudget::Count(4),
        seed: 2,
        ..TrainerConfig::default()
    };
    let fed = cfg.resolve().map_err(|e| e.to_string())?;
    let mut log = RunLog::in_memory();
    let offloaded = simulate(&cfg, &fed, Arc::new(MemoryStore::new()), &mut log)
        .map_err(|e| e.to_string())?
        .report;
    ensure(!offloaded.is_aborted(), || format!("{:?}", offloaded.aborted))?;
    let train: Vec<_> = log
        .of_kind(kinds::TASK_DISPATCHED)
        .filter(|r| r.payload["function"] == "local_train")
        .collect();
    ensure(!train.is_empty(), || "no local_train dispatches logged".into())?;
    let refs = train.iter().filter(|r| r.payload["payload"]["type"] == "object_ref").count();
    ensure(refs == train.len(), || format!("{refs}/{} dispatches used object_ref", train.len()))?;

    cfg.inline_threshold = 1 << 30;
    let mut inline_log = RunLog::in_memory();
    let inline = simulate(&cfg, &fed, Arc::new(MemoryStore::new()), &mut inline_log)
        .map_err(|e| e.to_string())?
        .report;
    ensure(
        inline_log
            .of_kind(kinds::TASK_DISPATCHED)
            .all(|r| r.payload["payload"]["type"] != "object_ref"),
        || "raised threshold still offloaded".into(),
    )?;
    ensure(offloaded.final_model_sha256 == inline.final_model_sha256, || "final models differ".into())?;
    ensure(offloaded.val_accuracy == inline.val_accuracy, || "accuracies differ".into())?;
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!("{} KiB adapter state, {refs} object_ref dispatches, inline run identical", trainable / 1024))
}

// 7. Every token defect is rejected before the dataloader runs.
fn auth_soundness() -> Outcome {
    let start = Instant::now();
    let mut manifest = create_federation("server", "server@lab.org").map_err(|e| e.to_string())?;
    add_member(&mut manifest, "site", "site@lab.org").unwrap();
    let endpoint = register_endpoint(&mut manifest, "site", "shard", "").unwrap().endpoint_id;
    let mut registry = DataloaderRegistry::new();
    registry.register("shard", "synthetic:blobs?classes=3&n=60&dim=4").unwrap();
    let mut rt = EndpointRuntime::new(
        manifest.clone(),
        EndpointConfig::new(endpoint, "shard"),
        registry,
        Arc::new(MemoryStore::new()),
    )
    .map_err(|e| e.to_string())?;
    let config = serde_json::to_value(TrainTaskConfig {
        model: ModelSpec::linear(4, 3),
        trainer: TrainerConfig::default(),
    })
    .unwrap();

    let now = unix_now();
    let outsider = create_federation("server", "server@lab.org").unwrap();
    let task = || {
        let mut t = TaskEnvelope::new("local_train", 0, "server");
        t.config = config.clone();
        t
    };
    let claims = |t: &TaskEnvelope| Claims {
        expiry: now + 60,
        group_id: manifest.group_id.clone(),
        round: 0,
        sender: "server".into(),
        task_id: t.task_id.clone(),
    };
    let mut cases: Vec<(&str, TaskEnvelope)> = Vec::new();
    let mut t = task();
    t.auth_token = sign_claims(outsider.secret(), &claims(&t));
    cases.push(("bad signature", t));
    let mut t = task();
    t.auth_token = sign_claims(manifest.secret(), &Claims { group_id: outsider.group_id.clone(), ..claims(&t) });
    cases.push(("wrong group", t));
    let mut t = task();
    t.sender = "mallory".into();
    t.auth_token = sign_claims(manifest.secret(), &Claims { sender: "mallory".into(), ..claims(&t) });
    cases.push(("unknown sender", t));
    let mut t = task();
    t.auth_token = issue_token(&manifest, "server", "another-task", 0, 60).unwrap();
    cases.push(("task mismatch", t));
    let mut t = task();
    t.auth_token = issue_token_at(&manifest, "server", &t.task_id, 0, 10, now - 3600).unwrap();
    cases.push(("expired", t));

    for (name, t) in &cases {
        let result: ResultEnvelope = rt.handle(t);
        ensure(matches!(result.failure(), Some(FailureReason::AuthRejected(_))), || {
            format!("{name}: {result:?}")
        })?;
    }
    ensure(rt.load_count() == 0, || format!("dataloader ran {} times", rt.load_count()))?;
    let mut good = task();
    good.auth_token = issue_token(&manifest, "server", &good.task_id, 0, 60).unwrap();
    ensure(rt.handle(&good).failure().is_none(), || "valid token rejected".into())?;
    ensure(rt.load_count() == 1, || "valid task did not load data".into())?;
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok("5 defects rejected, 0 loads; valid token loads once".into())
}

// 8. Codec round trips and corruption detection, bare and inside frames.
fn random_state(rng: &mut ChaCha8Rng) -> ModelState {
    let mut state = ModelState::new();
    for i in 0..rng.random_range(0..5) {
        let dims: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..6)).collect();
        let n: usize = dims.iter().product();
        let tensor = if rng.random_bool(0.5) {
            Tensor::from_f32(dims, (0..n).map(|_| f32::from_bits(rng.random())).collect())
        } else {
            Tensor::from_f64(dims, (0..n).map(|_| f64::from_bits(rng.random())).collect())
        };
        state.insert(format!("layer{i}.p{}", rng.random_range(0..1000)), tensor.unwrap()).unwrap();
    }
    state
}

fn raw_bits(state: &ModelState) -> Vec<(String, Vec<usize>, DType, Vec<u64>)> {
    state
        .iter()
        .map(|(name, t)| {
            let bits = match t.data() {
                TensorData::F32(v) => v.iter().map(|x| x.to_bits() as u64).collect(),
                TensorData::F64(v) => v.iter().map(|x| x.to_bits()).collect(),
            };
            (name.to_string(), t.dims().to_vec(), t.dtype(), bits)
        })
        .collect()
}

fn codec_fuzzing() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..10_000 {
        let state = random_state(&mut rng);
        let bytes = encode_state(&state);
        let back = decode_state(&bytes).map_err(|e| format!("state {i}: {e}"))?;
        ensure(raw_bits(&back) == raw_bits(&state), || format!("state {i} changed in transit"))?;
        ensure(encode_state(&back) == bytes, || format!("state {i} re-encodes differently"))?;
        if i % 10 == 0 {
            let mut result = ResultEnvelope::ok("t", "e", PayloadRef::inline(bytes.clone()), json!({}));
            result.metrics = json!({"n": i});
            let frame = decode_frame(&encode_frame(&Frame::Result(result))).map_err(|e| e.to_string())?;
            let Frame::Result(r) = frame else { return Err("frame kind changed".into()) };
            let PayloadRef::Inline { bytes: carried } = r.payload else { return Err("payload kind changed".into()) };
            ensure(carried == bytes, || format!("state {i} changed inside a frame"))?;
        }
    }
    let mut rejected = 0;
    for i in 0..10_000 {
        let bytes = encode_state(&random_state(&mut rng));
        let mut bad = bytes.clone();
        let bit = rng.random_range(0..bad.len() * 8);
        bad[bit / 8] ^= 1 << (bit % 8);
        ensure(decode_state(&bad).is_err(), || format!("flip {i} at bit {bit} accepted"))?;
        // The same flip carried through a frame is caught once the payload
        // is decoded.
        let framed = encode_frame(&Frame::Result(ResultEnvelope::ok("t", "e", PayloadRef::inline(bad), json!({}))));
        if let Ok(Frame::Result(r)) = decode_frame(&framed) {
            if let PayloadRef::Inline { bytes } = r.payload {
                ensure(decode_state(&bytes).is_err(), || format!("framed flip {i} accepted"))?;
            }
        }
        rejected += 1;
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("10000 round trips bit-exact, {rejected}/10000 flips rejected"))
}

// 9. Prompt templates and dataset profiles.
fn prompts_and_profiles() -> Outcome {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/testdata/prompts");
    for kind in DatasetKind::ALL {
        let path = dir.join(format!("{}.txt", kind.name().to_lowercase()));
        let golden = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let sample: BTreeMap<String, String> = PromptTemplate::for_kind(kind)
            .fields()
            .into_iter()
            .map(|f| (f.to_string(), format!("<{f}>")))
            .collect();
        let rendered = ALPACA.wrap(&format_prompt(kind, &sample).map_err(|e| e.to_string())?);
        ensure(rendered == golden, || format!("{kind} prompt differs from {}", path.display()))?;
    }
    use BatchBudget::{All, Count};
    let table = [
        (DatasetKind::BoolQ, Count(200), 350),
        (DatasetKind::CB, All, 350),
        (DatasetKind::COPA, All, 300),
        (DatasetKind::MultiRC, Count(200), 600),
        (DatasetKind::RTE, Count(200), 200),
        (DatasetKind::WiC, Count(200), 200),
        (DatasetKind::WSC, All, 220),
    ];
    for (kind, batches, tokens) in table {
        let p = profile_for(kind);
        ensure((p.batches_per_round, p.max_token_length) == (batches, tokens), || format!("{kind}: {p:?}"))?;
    }
    Ok("7 golden prompts and 7 profile rows match".into())
}

// 10. Analytic gradients against central differences.
fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let d = rng.random_range(1..6);
        let c = rng.random_range(2..5);
        let mut spec = match i % 3 {
            0 => ModelSpec::linear(d, c),
            1 => ModelSpec::mlp(d, rng.random_range(1..6), c),
            _ if rng.random_bool(0.5) => ModelSpec::linear(d, c)
                .with_adapter(AdapterSpec::new(rng.random_range(1..3), 2.0, vec!["linear.weight".into()]).unwrap()),
            _ => ModelSpec::mlp(d, rng.random_range(1..6), c).with_adapter(
                AdapterSpec::new(
                    rng.random_range(1..3),
                    3.0,
                    vec!["hidden.weight".into(), "output.weight".into()],
                )
                .unwrap(),
            ),
        };
        spec = spec.with_dtype(DType::F64).with_seed(rng.random());
        let mut model = ToyModel::init(&spec).map_err(|e| e.to_string())?;
        let mut params = ModelState::new();
        for (name, t) in model.trainable_state().iter() {
            let v = (0..t.numel()).map(|_| rng.random_range(-0.5..0.5)).collect();
            params.insert(name, Tensor::from_f64(t.dims().to_vec(), v).unwrap()).unwrap();
        }
        model = model.with_trainable(&params).map_err(|e| e.to_string())?;
        let batch = rng.random_range(1..5);
        let x = Array2::from_shape_fn((batch, d), |_| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..c)).collect();
        let (_, grads) = model.loss_and_gradients(&x, &labels).map_err(|e| e.to_string())?;
        for (name, t) in params.iter() {
            let analytic = grads.get(name).map_err(|e| e.to_string())?.to_f64_vec();
            let base = t.to_f64_vec();
            for k in 0..base.len() {
                let at = |delta: f64| {
                    let mut v = base.clone();
                    v[k] += delta;
                    let mut p = params.clone();
                    p.replace(name, Tensor::from_f64(t.dims().to_vec(), v).unwrap()).unwrap();
                    model.with_trainable(&p).unwrap().loss(&x, &labels).unwrap()
                };
                let h = 1e-5;
                let numeric = (at(h) - at(-h)) / (2.0 * h);
                let err = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(err);
                ensure(err < 1e-4, || {
                    let kind = if spec.kind == ModelKind::LinearSoftmax { "linear" } else { "mlp" };
                    format!("config {i} ({kind}) {name}[{k}]: {} vs {numeric}", analytic[k])
                })?;
            }
        }
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("100 configurations, worst relative error {worst:.1e}"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("adapter byte accounting", lora_accounting),
        ("fedavg oracle equivalence", fedavg_oracle),
        ("dual-dirichlet statistics", partition_statistics),
        ("directional accuracy pattern", directional_pattern),
        ("transport equivalence", transport_equivalence),
        ("payload path coverage", payload_path_coverage),
        ("auth soundness", auth_soundness),
        ("codec and frame fuzzing", codec_fuzzing),
        ("prompt goldens and profiles", prompts_and_profiles),
        ("gradient checks", gradient_checks),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
