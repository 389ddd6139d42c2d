//! Adam with element-wise gradient clipping.

use serde::{Deserialize, Serialize};

use super::GnnError;

/// Optimizer state. Gradients are clamped component-wise to
/// [-clip, clip] before touching the moments, which is what keeps the
/// occasional penalty-sized score from slamming the whole model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 0.04,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }
}

/// One clipped, bias-corrected Adam update in place. A non-finite
/// gradient component leaves parameters and state untouched so the
/// caller can log and move on.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
) -> Result<(), GnnError> {
    if params.len() != state.m.len() {
        return Err(GnnError::ParamLength {
            expected: state.m.len(),
            got: params.len(),
        });
    }
    if grads.len() != params.len() {
        return Err(GnnError::ParamLength {
            expected: params.len(),
            got: grads.len(),
        });
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(GnnError::NonFiniteGradient { index });
    }
    state.step += 1;
    let t = state.step as i32;
    let m_corr = 1.0 - state.beta1.powi(t);
    let v_corr = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i].clamp(-state.clip, state.clip);
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / m_corr;
        let v_hat = state.v[i] / v_corr;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}
