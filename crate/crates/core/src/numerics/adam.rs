use super::params::ParamStore;
use crate::error::{Error, Result};

/// Moment accumulators for every parameter of a [`ParamStore`], keyed by
/// position in the store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamStore, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            beta1,
            beta2,
            epsilon,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update on a flat parameter slice.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != m.len() || param.len() != v.len() {
        return Err(Error::shape(
            "adam_step",
            format!("param {} grad {} moments {}/{}", param.len(), grad.len(), m.len(), v.len()),
        ));
    }
    let c1 = 1.0 - beta1.powi(step as i32);
    let c2 = 1.0 - beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

/// Applies one Adam step to every trainable parameter that holds a gradient,
/// then clears the gradients. The step counter advances by exactly one.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.first.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("state tracks {} parameters, store has {}", state.first.len(), params.len()),
        ));
    }
    state.step += 1;
    let step = state.step;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    for (i, (name, t)) in params.iter_mut().enumerate() {
        if !t.requires_grad {
            t.grad = None;
            continue;
        }
        let Some(grad) = t.grad.take() else { continue };
        if state.first[i].len() != t.numel() {
            return Err(Error::shape("adam_step", format!("moment size mismatch for `{name}`")));
        }
        adam_update(
            t.data_mut(),
            &grad,
            &mut state.first[i],
            &mut state.second[i],
            step,
            lr,
            b1,
            b2,
            eps,
        )?;
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("adam_step"));
        }
    }
    Ok(())
}
