//! Gradient-descent state: SGD with learning-rate decay (the default) and
//! Adam, both behind global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimMethod {
    Sgd,
    Adam,
}

pub const SGD_LR: f64 = 1.0;
pub const ADAM_LR: f64 = 0.001;
pub const DECAY_FACTOR: f64 = 0.5;
pub const CLIP_NORM: f64 = 5.0;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state. Adam's moment tensors are aligned with the model's
/// parameter order; SGD keeps none.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub method: OptimMethod,
    pub learning_rate: f64,
    pub decay_factor: f64,
    /// First epoch (1-based) at which decay applies unconditionally.
    pub start_decay_at: usize,
    pub clip_norm: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimState {
    pub fn sgd(learning_rate: f64, decay_factor: f64, start_decay_at: usize, clip_norm: f64) -> Result<OptimState> {
        let s = OptimState {
            method: OptimMethod::Sgd,
            learning_rate,
            decay_factor,
            start_decay_at,
            clip_norm,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn adam(learning_rate: f64, clip_norm: f64, params: &ParamSet) -> Result<OptimState> {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let s = OptimState {
            method: OptimMethod::Adam,
            learning_rate,
            decay_factor: DECAY_FACTOR,
            start_decay_at: usize::MAX,
            clip_norm,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay_factor must be in (0, 1], got {}", self.decay_factor)));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        Ok(())
    }
}

/// Euclidean norm over the full gradient, accumulated in parameter order so
/// the value is reproducible.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    let mut acc = 0.0;
    for g in grads {
        for &x in g.data() {
            acc += x * x;
        }
    }
    acc.sqrt()
}

/// Clips the gradient to `clip_norm` (global norm), applies one update, and
/// advances the step counter. Rejects non-finite gradients before touching
/// parameters and verifies parameters stay finite afterwards, naming the
/// offending tensor either way.
pub fn clip_and_step(params: &mut ParamSet, grads: &[Tensor], optim: &mut OptimState) -> Result<()> {
    assert_eq!(grads.len(), params.len(), "one gradient per parameter");
    for (i, g) in grads.iter().enumerate() {
        if !g.all_finite() {
            return Err(Error::NonFinite { what: "gradient", name: params.name_at(i).to_string() });
        }
    }
    let norm = global_norm(grads);
    let scale = if norm > optim.clip_norm { optim.clip_norm / norm } else { 1.0 };

    optim.step += 1;
    match optim.method {
        OptimMethod::Sgd => {
            let lr = optim.learning_rate;
            for (i, g) in grads.iter().enumerate() {
                let t = params.tensor_at_mut(i);
                for (p, &gv) in t.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * scale * gv;
                }
            }
        }
        OptimMethod::Adam => {
            let t_step = optim.step as i32;
            let bias1 = 1.0 - ADAM_BETA1.powi(t_step);
            let bias2 = 1.0 - ADAM_BETA2.powi(t_step);
            let lr = optim.learning_rate;
            for (i, g) in grads.iter().enumerate() {
                let m = optim.m[i].data_mut();
                let v = optim.v[i].data_mut();
                let p = params.tensor_at_mut(i).data_mut();
                for j in 0..g.len() {
                    let gv = scale * g.data()[j];
                    m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gv;
                    v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gv * gv;
                    let m_hat = m[j] / bias1;
                    let v_hat = v[j] / bias2;
                    p[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
    for i in 0..params.len() {
        if !params.tensor_at(i).all_finite() {
            return Err(Error::NonFinite { what: "parameter", name: params.name_at(i).to_string() });
        }
    }
    Ok(())
}

/// Halves (by `decay_factor`) the SGD learning rate once the decay epoch is
/// reached or validation perplexity stopped improving. Adam runs at a fixed
/// rate.
pub fn maybe_decay(optim: &mut OptimState, val_ppl_history: &[f64], epoch: usize) {
    if optim.method != OptimMethod::Sgd {
        return;
    }
    let stalled = val_ppl_history.len() >= 2 && {
        let last = val_ppl_history[val_ppl_history.len() - 1];
        let prev = val_ppl_history[val_ppl_history.len() - 2];
        last >= prev
    };
    if epoch >= optim.start_decay_at || stalled {
        optim.learning_rate *= optim.decay_factor;
    }
}
