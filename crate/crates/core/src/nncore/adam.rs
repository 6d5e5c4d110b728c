use serde::{Deserialize, Serialize};

use super::array::{Float, Param};
use crate::error::{Error, Result};

/// ADAM optimizer state with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }
}

/// Applies one ADAM update to `params` in place. Moments are kept in f64 so
/// that the state does not depend on the parameter precision.
///
/// Gradients are validated before anything is mutated: a non-finite entry
/// rejects the whole step and names the parameter.
pub fn adam_step<T: Float>(params: &mut [(String, &mut Param<T>)], state: &mut AdamState) -> Result<()> {
    for (name, p) in params.iter() {
        if !p.grad.all_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    if state.first_moment.is_empty() {
        state.first_moment = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        state.second_moment = state.first_moment.clone();
    }
    if state.first_moment.len() != params.len() {
        return Err(Error::shape("adam_step", "parameter list changed between steps"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (idx, (name, p)) in params.iter_mut().enumerate() {
        let m = &mut state.first_moment[idx];
        let v = &mut state.second_moment[idx];
        if m.len() != p.len() {
            return Err(Error::shape("adam_step", format!("parameter `{name}` changed size")));
        }
        for k in 0..m.len() {
            let g = p.grad.data()[k].as_f64();
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g;
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g * g;
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            let upd = state.lr * mh / (vh.sqrt() + state.eps);
            let val = &mut p.value.data_mut()[k];
            *val = T::of(val.as_f64() - upd);
        }
    }
    Ok(())
}
