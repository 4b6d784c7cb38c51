use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Grads, ParamStore};

/// Adam moments and hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter.
///
/// The whole step is rejected, leaving parameters and moments untouched, if
/// any gradient entry is non-finite.
pub fn adam_step(store: &mut ParamStore, grads: &Grads, state: &mut AdamState) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Dimension(format!(
            "adam: {} parameters, {} gradients, {} moments",
            store.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, p) in store.iter().enumerate() {
        if p.requires_grad && grads.get(i).iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..store.len() {
        let p = store.get_mut(i);
        if !p.requires_grad {
            continue;
        }
        let g = grads.get(i);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}
