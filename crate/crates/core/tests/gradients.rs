//! Analytic gradients against central finite differences.

use fedsilo_core::adapters::AdapterSpec;
use fedsilo_core::tensor::{DType, ModelState, Tensor};
use fedsilo_core::trainer::{ModelKind, ModelSpec, ToyModel};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    // Gradients below the floor are compared absolutely.
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn random_state(like: &ModelState, rng: &mut ChaCha8Rng, scale: f64) -> ModelState {
    let mut out = ModelState::new();
    for (name, t) in like.iter() {
        let values = (0..t.numel()).map(|_| rng.random_range(-scale..scale)).collect();
        out.insert(name, Tensor::from_f64(t.dims().to_vec(), values).unwrap()).unwrap();
    }
    out
}

fn random_spec(rng: &mut ChaCha8Rng, with_adapter: bool) -> ModelSpec {
    let d = rng.random_range(1..7);
    let c = rng.random_range(2..6);
    let mut spec = if rng.random_bool(0.5) {
        ModelSpec::linear(d, c)
    } else {
        ModelSpec::mlp(d, rng.random_range(1..8), c)
    };
    spec = spec.with_dtype(DType::F64).with_seed(rng.random());
    if with_adapter {
        let targets: Vec<String> = match spec.kind {
            ModelKind::LinearSoftmax => vec!["linear.weight".into()],
            ModelKind::Mlp1Hidden => match rng.random_range(0..3) {
                0 => vec!["hidden.weight".into()],
                1 => vec!["output.weight".into()],
                _ => vec!["hidden.weight".into(), "output.weight".into()],
            },
        };
        let adapter = AdapterSpec::new(rng.random_range(1..4), rng.random_range(0.5..8.0), targets).unwrap();
        spec = spec.with_adapter(adapter);
    }
    spec
}

/// Returns the worst relative error over every trainable element.
fn check(model: &ToyModel, x: &Array2<f64>, labels: &[usize]) -> f64 {
    let (_, grads) = model.loss_and_gradients(x, labels).unwrap();
    let params = model.trainable_state();
    let mut worst: f64 = 0.0;
    for (name, t) in params.iter() {
        let base = t.to_f64_vec();
        let analytic = grads.get(name).unwrap().to_f64_vec();
        for i in 0..base.len() {
            let loss_at = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                let mut p = params.clone();
                p.replace(name, Tensor::from_f64(t.dims().to_vec(), v).unwrap()).unwrap();
                model.with_trainable(&p).unwrap().loss(x, labels).unwrap()
            };
            let numeric = (loss_at(STEP) - loss_at(-STEP)) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
    }
    worst
}

fn run(seed: u64, with_adapter: bool) -> (ModelSpec, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = random_spec(&mut rng, with_adapter);
    let mut model = ToyModel::init(&spec).unwrap();
    // Zero-initialised B would make the A gradients vanish; randomise all
    // trainable tensors so every path is exercised.
    model = model.with_trainable(&random_state(&model.trainable_state(), &mut rng, 0.5)).unwrap();
    let batch = rng.random_range(1..6);
    let x = Array2::from_shape_fn((batch, spec.input_dim), |_| rng.random_range(-1.5..1.5));
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..spec.class_count)).collect();
    let worst = check(&model, &x, &labels);
    (spec, worst)
}

#[test]
fn full_parameter_gradients() {
    let mut kinds = [0usize; 2];
    for seed in 0..100 {
        let (spec, worst) = run(seed, false);
        kinds[spec.kind as usize] += 1;
        assert!(worst < TOLERANCE, "seed {seed} {spec:?}: relative error {worst:e}");
    }
    assert!(kinds.iter().all(|&k| k > 20), "{kinds:?}");
}

#[test]
fn adapter_gradients() {
    for seed in 1000..1100 {
        let (spec, worst) = run(seed, true);
        assert!(worst < TOLERANCE, "seed {seed} {spec:?}: relative error {worst:e}");
    }
}

#[test]
fn adapter_gradient_of_zero_b_leaves_a_untouched() {
    let spec = ModelSpec::linear(3, 2)
        .with_dtype(DType::F64)
        .with_adapter(AdapterSpec::new(2, 2.0, vec!["linear.weight".into()]).unwrap());
    let model = ToyModel::init(&spec).unwrap();
    let x = Array2::from_shape_vec((2, 3), vec![0.1, -0.4, 0.9, 1.2, 0.3, -0.7]).unwrap();
    let (_, grads) = model.loss_and_gradients(&x, &[0, 1]).unwrap();
    assert!(grads.get("linear.weight.lora_A").unwrap().to_f64_vec().iter().all(|&g| g == 0.0));
    assert!(grads.get("linear.weight.lora_B").unwrap().to_f64_vec().iter().any(|&g| g != 0.0));
}
