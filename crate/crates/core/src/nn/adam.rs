use super::mlp::{MlpParams, ParamGradient};
use crate::error::{check_len, Error, Result};

/// Adam moment estimates for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &MlpParams, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            first_moment: vec![0.0; params.num_params()],
            second_moment: vec![0.0; params.num_params()],
            step_count: 0,
            beta1,
            beta2,
            epsilon,
        }
    }
}

/// One bias-corrected Adam update. Returns the new parameters and state;
/// the inputs are left untouched.
pub fn adam_step(
    params: &MlpParams,
    grad: &ParamGradient,
    state: &AdamState,
    lr: f64,
) -> Result<(MlpParams, AdamState)> {
    let mut p = params.clone();
    let mut s = state.clone();
    adam_step_in_place(&mut p, grad, &mut s, lr)?;
    Ok((p, s))
}

/// In-place variant used by the trainer. Nothing is modified on error.
pub fn adam_step_in_place(
    params: &mut MlpParams,
    grad: &ParamGradient,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    check_len("gradient", params.num_params(), grad.len())?;
    check_len("adam state", params.num_params(), state.first_moment.len())?;
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    if !grad.is_finite() {
        return Err(Error::Divergence("non-finite gradient entry".into()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let flat = params.flat_mut();
    for i in 0..flat.len() {
        let g = grad.as_flat()[i];
        let m = b1 * state.first_moment[i] + (1.0 - b1) * g;
        let v = b2 * state.second_moment[i] + (1.0 - b2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        flat[i] -= lr * (m / c1) / ((v / c2).sqrt() + eps);
    }
    Ok(())
}
