use serde::{Deserialize, Serialize};

use super::{EngineError, Parameter, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Coefficient of an L2 penalty folded into the gradient as `2 * l2 * w`
    /// for regularized parameters. Zero disables it.
    pub l2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-5, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, l2: 0.0 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Moment estimates for a fixed list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step_count: u64,
    pub hyper: AdamConfig,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Parameter<T>], hyper: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.tensor.shape().to_vec())).collect();
        Self { first_moment: zeros(), second_moment: zeros(), step_count: 0, hyper }
    }
}

/// One bias-corrected Adam update using the `grad` slot of every parameter.
///
/// All gradients are validated before any parameter is touched, so a failed
/// step leaves parameters and state unchanged.
pub fn adam_step<T: Real>(params: &mut [Parameter<T>], state: &mut AdamState<T>) -> Result<(), EngineError> {
    if params.len() != state.first_moment.len() {
        return Err(EngineError::Shape(format!(
            "optimizer tracks {} parameters, {} given",
            state.first_moment.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        let grad = p
            .tensor
            .grad()
            .ok_or_else(|| EngineError::Usage(format!("parameter `{}` has no gradient", p.name)))?;
        if state.first_moment[i].shape() != p.tensor.shape() {
            return Err(EngineError::Shape(format!(
                "moment shape {:?} does not match parameter `{}` {:?}",
                state.first_moment[i].shape(),
                p.name,
                p.tensor.shape()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(EngineError::NonFinite { name: p.name.clone() });
        }
    }

    state.step_count += 1;
    let h = state.hyper;
    let t = state.step_count as i32;
    let b1 = T::from_f64_lossy(h.beta1);
    let b2 = T::from_f64_lossy(h.beta2);
    let one = T::one();
    let correction1 = T::from_f64_lossy(1.0 - h.beta1.powi(t));
    let correction2 = T::from_f64_lossy(1.0 - h.beta2.powi(t));
    let lr = T::from_f64_lossy(h.lr);
    let eps = T::from_f64_lossy(h.epsilon);
    let two_l2 = T::from_f64_lossy(2.0 * h.l2);

    for (i, p) in params.iter_mut().enumerate() {
        let grad: Vec<T> = p.tensor.grad().expect("checked above").to_vec();
        let decay = p.regularized && h.l2 != 0.0;
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let w = p.tensor.data_mut();
        for j in 0..w.len() {
            let g = if decay { grad[j] + two_l2 * w[j] } else { grad[j] };
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let m_hat = m[j] / correction1;
            let v_hat = v[j] / correction2;
            w[j] = w[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
