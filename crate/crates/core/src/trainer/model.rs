//! Small differentiable classifiers used as stand-ins for a large model.
//!
//! Parameters live in flat f64 buffers while training; the exchanged
//! [`ModelState`]s use the model's configured dtype. When an adapter is
//! attached only its `A`/`B` matrices are trainable and the base weights are
//! never written.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::adapters::{self, AdapterSpec, AdapterState, LORA_A_SUFFIX, LORA_B_SUFFIX};
use crate::tensor::{DType, ModelState, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinearSoftmax,
    Mlp1Hidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub class_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    #[serde(default)]
    pub dtype: DType,
    /// Seeds the shared base weights and the initial adapter.
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterSpec>,
}

impl ModelSpec {
    pub fn linear(input_dim: usize, class_count: usize) -> Self {
        Self {
            kind: ModelKind::LinearSoftmax,
            input_dim,
            class_count,
            hidden_dim: None,
            dtype: DType::F32,
            init_seed: 0,
            adapter: None,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, class_count: usize) -> Self {
        Self {
            kind: ModelKind::Mlp1Hidden,
            hidden_dim: Some(hidden_dim),
            ..Self::linear(input_dim, class_count)
        }
    }

    pub fn with_adapter(mut self, adapter: AdapterSpec) -> Self {
        self.adapter = Some(adapter);
        self
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    /// (weight name, bias name, out, in) per layer.
    fn layer_shapes(&self) -> Result<Vec<(&'static str, &'static str, usize, usize)>, TrainError> {
        if self.input_dim == 0 || self.class_count == 0 {
            return Err(TrainError::InvalidModel("input_dim and class_count must be positive".into()));
        }
        match self.kind {
            ModelKind::LinearSoftmax => Ok(vec![(
                "linear.weight",
                "linear.bias",
                self.class_count,
                self.input_dim,
            )]),
            ModelKind::Mlp1Hidden => {
                let h = self
                    .hidden_dim
                    .filter(|&h| h > 0)
                    .ok_or_else(|| TrainError::InvalidModel("mlp_1_hidden needs a positive hidden_dim".into()))?;
                Ok(vec![
                    ("hidden.weight", "hidden.bias", h, self.input_dim),
                    ("output.weight", "output.bias", self.class_count, h),
                ])
            }
        }
    }
}

const ADAPTER_SEED_SALT: u64 = 0x4c6f_5241;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Weight,
    Bias,
    LoraA,
    LoraB,
}

#[derive(Debug, Clone)]
struct Slot {
    name: String,
    dims: Vec<usize>,
    role: Role,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    weight: usize,
    bias: usize,
    lora: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    spec: ModelSpec,
    slots: Vec<Slot>,
    values: Vec<Vec<f64>>,
    layers: Vec<Layer>,
    trainable: Vec<usize>,
}

struct LayerCache {
    input: Array2<f64>,
    /// `x · Aᵀ` when the layer carries an adapter.
    projected: Option<Array2<f64>>,
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    /// tanh activations of the hidden layer (MLP only).
    hidden: Option<Array2<f64>>,
}

impl ToyModel {
    /// Seeded base weights (Gaussian, std 1/sqrt(fan_in); zero biases) plus a
    /// fresh adapter when `spec` asks for one.
    pub fn init(spec: &ModelSpec) -> Result<Self, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let mut base = ModelState::new();
        for (wname, bname, out, inp) in spec.layer_shapes()? {
            let normal = Normal::new(0.0, 1.0 / (inp as f64).sqrt()).expect("positive std");
            let w: Vec<f64> = (0..out * inp).map(|_| normal.sample(&mut rng)).collect();
            base.insert(wname, Tensor::from_f64_as(vec![out, inp], w, spec.dtype)?)?;
            base.insert(bname, Tensor::zeros(vec![out], spec.dtype)?)?;
        }
        let adapter = match &spec.adapter {
            Some(a) => Some(adapters::init_adapter(a, &base, spec.init_seed ^ ADAPTER_SEED_SALT)?),
            None => None,
        };
        Self::from_parts(spec.clone(), &base, adapter.as_ref())
    }

    pub fn from_parts(spec: ModelSpec, base: &ModelState, adapter: Option<&AdapterState>) -> Result<Self, TrainError> {
        let shapes = spec.layer_shapes()?;
        let mut slots = Vec::new();
        let mut values = Vec::new();
        let mut layers = Vec::new();
        for (wname, bname, out, inp) in &shapes {
            let w = base.get(wname)?;
            let b = base.get(bname)?;
            if w.dims() != [*out, *inp] || b.dims() != [*out] {
                return Err(TrainError::ShapeMismatch(format!(
                    "{wname} {:?} / {bname} {:?}, expected [{out}, {inp}] / [{out}]",
                    w.dims(),
                    b.dims()
                )));
            }
            layers.push(Layer {
                weight: slots.len(),
                bias: slots.len() + 1,
                lora: None,
            });
            for (name, t, role) in [(wname, w, Role::Weight), (bname, b, Role::Bias)] {
                slots.push(Slot {
                    name: name.to_string(),
                    dims: t.dims().to_vec(),
                    role,
                });
                values.push(t.to_f64_vec());
            }
        }
        if base.len() != slots.len() {
            return Err(TrainError::InvalidModel(format!(
                "base state has {} entries, model expects {}",
                base.len(),
                slots.len()
            )));
        }

        let trainable = match (&spec.adapter, adapter) {
            (None, None) => (0..slots.len()).collect(),
            (Some(aspec), Some(state)) => {
                adapters::check_adapter(aspec, base, state)?;
                let mut trainable = Vec::new();
                for (target, pair) in state.iter() {
                    let li = shapes
                        .iter()
                        .position(|(w, ..)| *w == target)
                        .ok_or_else(|| TrainError::InvalidModel(format!("adapter target {target} is not a layer weight")))?;
                    let ia = slots.len();
                    for (t, suffix, role) in [(&pair.a, LORA_A_SUFFIX, Role::LoraA), (&pair.b, LORA_B_SUFFIX, Role::LoraB)] {
                        slots.push(Slot {
                            name: format!("{target}{suffix}"),
                            dims: t.dims().to_vec(),
                            role,
                        });
                        values.push(t.to_f64_vec());
                    }
                    layers[li].lora = Some((ia, ia + 1));
                    trainable.extend([ia, ia + 1]);
                }
                trainable
            }
            (Some(_), None) => return Err(TrainError::InvalidModel("adapter spec without adapter state".into())),
            (None, Some(_)) => return Err(TrainError::InvalidModel("adapter state without adapter spec".into())),
        };
        Ok(Self {
            spec,
            slots,
            values,
            layers,
            trainable,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn has_adapter(&self) -> bool {
        self.spec.adapter.is_some()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count
    }

    fn slot_state(&self, indices: impl Iterator<Item = usize>) -> ModelState {
        let mut state = ModelState::new();
        for i in indices {
            let slot = &self.slots[i];
            let t = Tensor::from_f64_as(slot.dims.clone(), self.values[i].clone(), self.spec.dtype)
                .expect("slot dims match values");
            state.insert(slot.name.clone(), t).expect("slot names unique");
        }
        state
    }

    /// Weights and biases (without adapters), in the model dtype.
    pub fn base_state(&self) -> ModelState {
        self.slot_state(
            (0..self.slots.len()).filter(|&i| matches!(self.slots[i].role, Role::Weight | Role::Bias)),
        )
    }

    /// The parameters that training updates and clients exchange.
    pub fn trainable_state(&self) -> ModelState {
        self.slot_state(self.trainable.iter().copied())
    }

    pub fn adapter_state(&self) -> Option<AdapterState> {
        let spec = self.spec.adapter.as_ref()?;
        let base = self.base_state();
        let fresh = adapters::init_adapter(spec, &base, 0).expect("model adapter is valid");
        Some(adapters::merge_trainable(&fresh, &self.trainable_state()).expect("trainable state follows convention"))
    }

    /// Base weights with adapters folded in.
    pub fn merged_state(&self) -> ModelState {
        match (&self.spec.adapter, self.adapter_state()) {
            (Some(spec), Some(adapter)) => {
                adapters::merged_model(&self.base_state(), &adapter, spec).expect("model adapter is valid")
            }
            _ => self.base_state(),
        }
    }

    /// A copy with the trainable parameters replaced by `state`, which must
    /// carry exactly the names and shapes of [`Self::trainable_state`].
    pub fn with_trainable(&self, state: &ModelState) -> Result<Self, TrainError> {
        if state.len() != self.trainable.len() {
            return Err(TrainError::ShapeMismatch(format!(
                "expected {} trainable entries, got {}",
                self.trainable.len(),
                state.len()
            )));
        }
        let mut out = self.clone();
        for (&i, (name, t)) in self.trainable.iter().zip(state.iter()) {
            let slot = &self.slots[i];
            if slot.name != name || slot.dims != t.dims() {
                return Err(TrainError::ShapeMismatch(format!(
                    "entry {name} {:?} does not match {} {:?}",
                    t.dims(),
                    slot.name,
                    slot.dims
                )));
            }
            out.values[i] = t.to_f64_vec();
        }
        Ok(out)
    }

    fn matrix(&self, i: usize) -> ArrayView2<'_, f64> {
        let d = &self.slots[i].dims;
        ArrayView2::from_shape((d[0], d[1]), &self.values[i]).expect("slot dims match values")
    }

    fn vector(&self, i: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.values[i][..])
    }

    fn lora_factor(&self) -> f64 {
        self.spec.adapter.as_ref().map_or(0.0, AdapterSpec::factor)
    }

    fn layer_forward(&self, layer: &Layer, x: &Array2<f64>) -> (Array2<f64>, Option<Array2<f64>>) {
        let mut z = x.dot(&self.matrix(layer.weight).t());
        z += &self.vector(layer.bias);
        let projected = layer.lora.map(|(ia, ib)| {
            let u = x.dot(&self.matrix(ia).t());
            z.scaled_add(self.lora_factor(), &u.dot(&self.matrix(ib).t()));
            u
        });
        (z, projected)
    }

    fn forward_cached(&self, x: &Array2<f64>) -> Result<(Array2<f64>, ForwardCache), TrainError> {
        if x.ncols() != self.spec.input_dim {
            return Err(TrainError::ShapeMismatch(format!(
                "input has {} features, model expects {}",
                x.ncols(),
                self.spec.input_dim
            )));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut hidden = None;
        let mut current = x.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let (z, projected) = self.layer_forward(layer, &current);
            caches.push(LayerCache {
                input: current,
                projected,
            });
            current = if k + 1 < self.layers.len() {
                let h = z.mapv(f64::tanh);
                hidden = Some(h.clone());
                h
            } else {
                z
            };
        }
        Ok((current, ForwardCache { layers: caches, hidden }))
    }

    pub fn logits(&self, x: &Array2<f64>) -> Result<Array2<f64>, TrainError> {
        Ok(self.forward_cached(x)?.0)
    }

    /// Mean cross-entropy on a batch (forward only).
    pub fn loss(&self, x: &Array2<f64>, labels: &[usize]) -> Result<f64, TrainError> {
        Ok(super::cross_entropy(&self.logits(x)?, labels)?.0)
    }

    /// Loss and flat gradients for each trainable slot, in trainable order.
    pub(crate) fn loss_and_grad_buffers(
        &self,
        x: &Array2<f64>,
        labels: &[usize],
    ) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
        let (logits, cache) = self.forward_cached(x)?;
        let (loss, mut dz) = super::cross_entropy(&logits, labels)?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.slots.len()];
        let wants = |i: usize| self.trainable.contains(&i);
        let factor = self.lora_factor();

        for k in (0..self.layers.len()).rev() {
            let layer = self.layers[k];
            let lc = &cache.layers[k];
            if wants(layer.weight) {
                grads[layer.weight] = Some(into_vec(dz.t().dot(&lc.input)));
            }
            if wants(layer.bias) {
                grads[layer.bias] = Some(into_vec(dz.sum_axis(Axis(0))));
            }
            let mut dz_b = None;
            if let (Some((ia, ib)), Some(u)) = (layer.lora, &lc.projected) {
                // z += f · (x Aᵀ) Bᵀ  ⇒  dB = f · dzᵀ u,  dA = f · (dz B)ᵀ x
                let mut d_b = dz.t().dot(u);
                d_b *= factor;
                let zb = dz.dot(&self.matrix(ib));
                let mut d_a = zb.t().dot(&lc.input);
                d_a *= factor;
                grads[ia] = Some(into_vec(d_a));
                grads[ib] = Some(into_vec(d_b));
                dz_b = Some(zb);
            }
            if k == 0 {
                break;
            }
            // Propagate to the previous layer's output, then through tanh.
            let mut dx = dz.dot(&self.matrix(layer.weight));
            if let (Some((ia, _)), Some(zb)) = (layer.lora, dz_b) {
                dx.scaled_add(factor, &zb.dot(&self.matrix(ia)));
            }
            let h = cache.hidden.as_ref().expect("multi-layer models cache activations");
            dx.zip_mut_with(h, |d, &hv| *d *= 1.0 - hv * hv);
            dz = dx;
        }
        let out = self
            .trainable
            .iter()
            .map(|&i| grads[i].take().expect("every trainable slot receives a gradient"))
            .collect();
        Ok((loss, out))
    }

    /// Loss and gradients of the trainable parameters as an F64 state.
    pub fn loss_and_gradients(&self, x: &Array2<f64>, labels: &[usize]) -> Result<(f64, ModelState), TrainError> {
        let (loss, buffers) = self.loss_and_grad_buffers(x, labels)?;
        let mut state = ModelState::new();
        for (&i, g) in self.trainable.iter().zip(buffers) {
            let slot = &self.slots[i];
            state.insert(slot.name.clone(), Tensor::from_f64(slot.dims.clone(), g)?)?;
        }
        Ok((loss, state))
    }

    /// Names and mutable buffers of the trainable slots, in trainable order.
    pub(crate) fn trainable_buffers_mut(&mut self) -> Vec<(&str, &mut [f64])> {
        let mut out: Vec<Option<(&str, &mut [f64])>> = self
            .slots
            .iter()
            .zip(self.values.iter_mut())
            .map(|(s, v)| Some((s.name.as_str(), v.as_mut_slice())))
            .collect();
        self.trainable.iter().map(|&i| out[i].take().expect("distinct slots")).collect()
    }

    /// Rounds trainable values through the model dtype so the in-memory
    /// model equals what the exchanged state describes.
    pub(crate) fn round_to_dtype(&mut self) {
        if self.spec.dtype == DType::F32 {
            for &i in &self.trainable {
                for v in &mut self.values[i] {
                    *v = f64::from(*v as f32);
                }
            }
        }
    }
}

fn into_vec<D: ndarray::Dimension>(a: ndarray::Array<f64, D>) -> Vec<f64> {
    let a = a.as_standard_layout().into_owned();
    let (v, offset) = a.into_raw_vec_and_offset();
    debug_assert!(offset.unwrap_or(0) == 0);
    v
}

/// Argmax per row, ties toward the lowest class index.
pub fn predict(logits: &Array2<f64>) -> Array1<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
