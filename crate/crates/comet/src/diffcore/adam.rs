use super::params::ParamStore;
use super::tensor::Tensor;
use crate::{Error, Result};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    /// Loss-coupled L2 weight decay added to the raw gradient.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, weight_decay: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Default)]
pub struct AdamState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Step-decay schedule: the learning rate is multiplied by `factor` once per
/// `every` epochs (e.g. 0.2 per 15 epochs).
pub fn scheduled_lr(lr0: f64, epoch: usize, factor: f64, every: usize) -> f64 {
    lr0 * factor.powi((epoch / every.max(1)) as i32)
}

/// One Adam update over every trainable parameter that has a gradient entry.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (name, param) in store.iter_mut() {
        if !param.trainable {
            continue;
        }
        let Some(grad) = grads.get(name) else { continue };
        if grad.shape() != param.tensor.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("{name}: grad {:?} vs param {:?}", grad.shape(), param.tensor.shape()),
            ));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
        for i in 0..grad.numel() {
            let g = grad.data()[i] + cfg.weight_decay * param.tensor.data()[i];
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * g;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            param.tensor.data_mut()[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
