//! LoRA low-rank adapters.
//!
//! Each adapted weight `W` (out × in) gets a pair `A` (rank × in) and
//! `B` (out × rank). The effective weight is `W + (scaling / rank) · B·A`.
//! `A` starts Gaussian and `B` starts at zero, so a fresh adapter leaves the
//! base model unchanged. Only `A` and `B` are trained and exchanged; on the
//! wire they are named `<target>.lora_A` and `<target>.lora_B`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ModelState, Tensor, TensorError};

pub const LORA_A_SUFFIX: &str = ".lora_A";
pub const LORA_B_SUFFIX: &str = ".lora_B";
/// Standard deviation of the Gaussian used to initialize `A`.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error("adapter target not found in base model: {0}")]
    TargetNotFound(String),
    #[error("adapter target {name} is not a matrix (dims {dims:?})")]
    TargetNotMatrix { name: String, dims: Vec<usize> },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid adapter spec: {0}")]
    InvalidSpec(String),
    #[error("trainable state violates the naming convention: {0}")]
    NameConventionViolation(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub rank: usize,
    pub scaling: f64,
    pub target_names: Vec<String>,
}

impl AdapterSpec {
    pub fn new(rank: usize, scaling: f64, target_names: Vec<String>) -> Result<Self, AdapterError> {
        let spec = Self {
            rank,
            scaling,
            target_names,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.rank == 0 {
            return Err(AdapterError::InvalidSpec("rank must be at least 1".into()));
        }
        if !(self.scaling > 0.0 && self.scaling.is_finite()) {
            return Err(AdapterError::InvalidSpec("scaling must be positive".into()));
        }
        if self.target_names.is_empty() {
            return Err(AdapterError::InvalidSpec("no target names".into()));
        }
        Ok(())
    }

    /// The multiplier applied to `B·A`.
    pub fn factor(&self) -> f64 {
        self.scaling / self.rank as f64
    }
}

/// The trainable pair for one adapted matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
}

/// Adapter matrices keyed by target name, in spec order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdapterState {
    pairs: Vec<(String, LoraPair)>,
}

impl AdapterState {
    pub fn get(&self, target: &str) -> Option<&LoraPair> {
        self.pairs.iter().find(|(n, _)| n == target).map(|(_, p)| p)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &LoraPair)> {
        self.pairs.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn base_matrix<'a>(base: &'a ModelState, name: &str) -> Result<(&'a Tensor, usize, usize), AdapterError> {
    let w = base
        .get(name)
        .map_err(|_| AdapterError::TargetNotFound(name.to_string()))?;
    let (out, inp) = w.matrix_shape().map_err(|_| AdapterError::TargetNotMatrix {
        name: name.to_string(),
        dims: w.dims().to_vec(),
    })?;
    Ok((w, out, inp))
}

/// Creates a fresh adapter: Gaussian `A`, zero `B`, in the base weight's dtype.
pub fn init_adapter(spec: &AdapterSpec, base: &ModelState, seed: u64) -> Result<AdapterState, AdapterError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let mut pairs = Vec::with_capacity(spec.target_names.len());
    for name in &spec.target_names {
        let (w, out, inp) = base_matrix(base, name)?;
        let a: Vec<f64> = (0..spec.rank * inp).map(|_| normal.sample(&mut rng)).collect();
        let a = Tensor::from_f64_as(vec![spec.rank, inp], a, w.dtype())?;
        let b = Tensor::zeros(vec![out, spec.rank], w.dtype())?;
        pairs.push((name.clone(), LoraPair { a, b }));
    }
    Ok(AdapterState { pairs })
}

/// `base + (scaling / rank) · B·A`, in the base weight's dtype.
pub fn effective_weight(base: &Tensor, a: &Tensor, b: &Tensor, spec: &AdapterSpec) -> Result<Tensor, AdapterError> {
    let (out, inp) = base
        .matrix_shape()
        .map_err(|_| AdapterError::ShapeMismatch(format!("base weight dims {:?}", base.dims())))?;
    check_pair_shapes(out, inp, spec.rank, a, b)?;
    let r = spec.rank;
    let factor = spec.factor();
    let av = a.to_f64_vec();
    let bv = b.to_f64_vec();
    // Identity on a zero update must be bit-exact, including signed zeros.
    if bv.iter().all(|&x| x == 0.0) {
        return Ok(base.clone());
    }
    let mut w = base.to_f64_vec();
    for i in 0..out {
        for k in 0..r {
            let bik = bv[i * r + k];
            if bik == 0.0 {
                continue;
            }
            let row = &av[k * inp..(k + 1) * inp];
            for (j, &akj) in row.iter().enumerate() {
                w[i * inp + j] += factor * bik * akj;
            }
        }
    }
    Ok(Tensor::from_f64_as(vec![out, inp], w, base.dtype())?)
}

fn check_pair_shapes(out: usize, inp: usize, rank: usize, a: &Tensor, b: &Tensor) -> Result<(), AdapterError> {
    if a.dims() != [rank, inp] {
        return Err(AdapterError::ShapeMismatch(format!(
            "A has dims {:?}, expected [{rank}, {inp}]",
            a.dims()
        )));
    }
    if b.dims() != [out, rank] {
        return Err(AdapterError::ShapeMismatch(format!(
            "B has dims {:?}, expected [{out}, {rank}]",
            b.dims()
        )));
    }
    Ok(())
}

/// Applies every adapter in `adapter` to a copy of `base`.
pub fn merged_model(base: &ModelState, adapter: &AdapterState, spec: &AdapterSpec) -> Result<ModelState, AdapterError> {
    let mut merged = base.clone();
    for (name, pair) in adapter.iter() {
        let (w, _, _) = base_matrix(base, name)?;
        merged.replace(name, effective_weight(w, &pair.a, &pair.b, spec)?)?;
    }
    Ok(merged)
}

/// Checks that an adapter conforms to `spec` and the base model's shapes.
pub fn check_adapter(spec: &AdapterSpec, base: &ModelState, adapter: &AdapterState) -> Result<(), AdapterError> {
    if adapter.targets().ne(spec.target_names.iter().map(String::as_str)) {
        return Err(AdapterError::ShapeMismatch("adapter targets differ from spec".into()));
    }
    for (name, pair) in adapter.iter() {
        let (_, out, inp) = base_matrix(base, name)?;
        check_pair_shapes(out, inp, spec.rank, &pair.a, &pair.b)?;
    }
    Ok(())
}

/// Shape inputs for payload accounting at scales we never materialize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureProfile {
    pub name: String,
    pub layer_count: usize,
    /// Adapted matrices per layer as (name, out_dim, in_dim).
    pub targets: Vec<(String, usize, usize)>,
    pub bytes_per_param: usize,
    /// Parameter count of the full dense model, when known.
    pub full_model_params: Option<u64>,
}

impl ArchitectureProfile {
    /// LLaMA 2 7B with adapters on the query and value projections.
    pub fn llama2_7b() -> Self {
        const HIDDEN: u64 = 4096;
        const FFN: u64 = 11008;
        const VOCAB: u64 = 32000;
        const LAYERS: u64 = 32;
        let per_layer = 4 * HIDDEN * HIDDEN + 3 * HIDDEN * FFN + 2 * HIDDEN;
        let full = 2 * VOCAB * HIDDEN + LAYERS * per_layer + HIDDEN;
        Self {
            name: "llama2-7b".into(),
            layer_count: LAYERS as usize,
            targets: vec![
                ("q_proj".into(), HIDDEN as usize, HIDDEN as usize),
                ("v_proj".into(), HIDDEN as usize, HIDDEN as usize),
            ],
            bytes_per_param: 4,
            full_model_params: Some(full),
        }
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.targets.iter().any(|(_, o, i)| *o == 0 || *i == 0) {
            return Err(AdapterError::InvalidSpec("profile has a zero extent".into()));
        }
        Ok(())
    }

    pub fn full_model_bytes(&self) -> Option<u64> {
        self.full_model_params.map(|p| p * self.bytes_per_param as u64)
    }
}

/// Bytes of trainable adapter parameters exchanged per model copy.
pub fn trainable_bytes(spec: &AdapterSpec, arch: &ArchitectureProfile) -> u64 {
    let r = spec.rank as u64;
    let per_layer: u64 = arch
        .targets
        .iter()
        .map(|(_, out, inp)| r * *inp as u64 + *out as u64 * r)
        .sum();
    arch.layer_count as u64 * per_layer * arch.bytes_per_param as u64
}

/// Formats a byte count in binary megabytes, e.g. `16.0 MiB`.
pub fn format_mib(bytes: u64) -> String {
    format!("{:.1} MiB", bytes as f64 / (1u64 << 20) as f64)
}

/// Flattens an adapter into the exchanged `<target>.lora_A/B` state.
pub fn extract_trainable(adapter: &AdapterState) -> ModelState {
    let mut state = ModelState::new();
    for (name, pair) in adapter.iter() {
        state
            .insert(format!("{name}{LORA_A_SUFFIX}"), pair.a.clone())
            .and_then(|_| state.insert(format!("{name}{LORA_B_SUFFIX}"), pair.b.clone()))
            .expect("adapter targets are unique");
    }
    state
}

/// Replaces the matrices of `adapter` with those carried by `state`.
///
/// `state` must hold exactly one `lora_A` and one `lora_B` entry for every
/// target of `adapter`, with matching shapes and dtypes, and nothing else.
pub fn merge_trainable(adapter: &AdapterState, state: &ModelState) -> Result<AdapterState, AdapterError> {
    let violation = |msg: String| AdapterError::NameConventionViolation(msg);
    for name in state.names() {
        let target = name
            .strip_suffix(LORA_A_SUFFIX)
            .or_else(|| name.strip_suffix(LORA_B_SUFFIX))
            .ok_or_else(|| violation(format!("entry {name:?} lacks a .lora_A/.lora_B suffix")))?;
        if adapter.get(target).is_none() {
            return Err(violation(format!("entry {name:?} names an unknown target")));
        }
    }
    if state.len() != 2 * adapter.len() {
        return Err(violation(format!(
            "expected {} entries, found {}",
            2 * adapter.len(),
            state.len()
        )));
    }
    let mut pairs = Vec::with_capacity(adapter.len());
    for (name, old) in adapter.iter() {
        let fetch = |suffix: &str, old: &Tensor| -> Result<Tensor, AdapterError> {
            let key = format!("{name}{suffix}");
            let t = state.get(&key).map_err(|_| violation(format!("missing entry {key:?}")))?;
            if !t.same_signature(old) {
                return Err(AdapterError::ShapeMismatch(format!(
                    "{key}: {:?} {:?} vs expected {:?} {:?}",
                    t.dtype(),
                    t.dims(),
                    old.dtype(),
                    old.dims()
                )));
            }
            Ok(t.clone())
        };
        pairs.push((
            name.to_string(),
            LoraPair {
                a: fetch(LORA_A_SUFFIX, &old.a)?,
                b: fetch(LORA_B_SUFFIX, &old.b)?,
            },
        ));
    }
    Ok(AdapterState { pairs })
}
