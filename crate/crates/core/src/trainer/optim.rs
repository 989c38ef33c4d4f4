//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::tensor::{ModelState, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    name: String,
    first: Vec<f64>,
    second: Vec<f64>,
}

/// First and second moment accumulators, one slot per parameter, plus the
/// shared step counter. Slots are created on the first step.
#[derive(Debug, Clone, Default)]
pub struct AdamWState {
    step: u64,
    slots: Vec<Moments>,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.slots.iter().find(|m| m.name == name).map(|m| m.first.as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.slots.iter().find(|m| m.name == name).map(|m| m.second.as_slice())
    }

    /// One update over named flat parameter buffers, in place.
    pub(crate) fn update(
        &mut self,
        params: &mut [(&str, &mut [f64])],
        grads: &[&[f64]],
        lr: f64,
        cfg: &AdamWConfig,
    ) -> Result<(), TrainError> {
        if params.len() != grads.len() {
            return Err(TrainError::ShapeMismatch(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(TrainError::ShapeMismatch(format!(
                    "{name}: {} values but {} gradient entries",
                    p.len(),
                    g.len()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteGradient((*name).to_string()));
            }
        }
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|(name, p)| Moments {
                    name: (*name).to_string(),
                    first: vec![0.0; p.len()],
                    second: vec![0.0; p.len()],
                })
                .collect();
        } else if self.slots.len() != params.len()
            || self
                .slots
                .iter()
                .zip(params.iter())
                .any(|(m, (name, p))| m.name != *name || m.first.len() != p.len())
        {
            return Err(TrainError::ShapeMismatch("parameter set changed between steps".into()));
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (((_, p), g), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
            for i in 0..p.len() {
                let gi = g[i];
                slot.first[i] = cfg.beta1 * slot.first[i] + (1.0 - cfg.beta1) * gi;
                slot.second[i] = cfg.beta2 * slot.second[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = slot.first[i] / bc1;
                let v_hat = slot.second[i] / bc2;
                p[i] -= lr * cfg.weight_decay * p[i];
                p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}

/// One AdamW step over a named parameter state. Returns the updated
/// parameters in their original dtypes.
pub fn adamw_step(
    params: &ModelState,
    grads: &ModelState,
    opt: &mut AdamWState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<ModelState, TrainError> {
    let mirrors = params.len() == grads.len()
        && params
            .iter()
            .zip(grads.iter())
            .all(|((pn, pt), (gn, gt))| pn == gn && pt.dims() == gt.dims());
    if !mirrors {
        return Err(TrainError::ShapeMismatch("gradient state does not mirror parameters".into()));
    }
    let mut values: Vec<(String, Vec<f64>)> = params.iter().map(|(n, t)| (n.to_string(), t.to_f64_vec())).collect();
    let grad_values: Vec<Vec<f64>> = grads.iter().map(|(_, t)| t.to_f64_vec()).collect();
    let grad_refs: Vec<&[f64]> = grad_values.iter().map(Vec::as_slice).collect();
    let mut slices: Vec<(&str, &mut [f64])> = values.iter_mut().map(|(n, v)| (n.as_str(), v.as_mut_slice())).collect();
    opt.update(&mut slices, &grad_refs, lr, cfg)?;
    let mut out = ModelState::new();
    for ((name, v), (_, orig)) in values.into_iter().zip(params.iter()) {
        out.insert(name, Tensor::from_f64_as(orig.dims().to_vec(), v, orig.dtype())?)?;
    }
    Ok(out)
}
