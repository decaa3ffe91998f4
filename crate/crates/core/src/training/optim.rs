//! AdamW with decoupled weight decay and the polynomial learning-rate schedule.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor4};

use super::TrainError;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor4<T>>,
    pub v: Vec<Tensor4<T>>,
}

impl<T: Scalar> AdamWState<T> {
    /// Zeroed moments mirroring `params`, with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(params: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor4<T>> = params.iter().map(|(_, p)| Tensor4::zeros(p.value.shape())).collect();
        AdamWState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update: `θ ← θ − lr·wd·θ`, then the bias-corrected Adam step.
///
/// `grads` may omit parameters; those are treated as having zero gradient.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[(ParamId, Tensor4<T>)],
    state: &mut AdamWState<T>,
    lr: f64,
) -> Result<(), TrainError> {
    for (id, g) in grads {
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient(params.name(*id).to_string()));
        }
        if g.shape() != params.get(*id).shape() {
            return Err(TrainError::Config(format!(
                "gradient for {} has shape {}, parameter has {}",
                params.name(*id),
                g.shape(),
                params.get(*id).shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = T::lit(1.0 - b1.powi(t));
    let bc2 = T::lit(1.0 - b2.powi(t));
    let decay = T::lit(1.0 - lr * state.weight_decay);
    let lr_t = T::lit(lr);
    let eps = T::lit(state.eps);
    let (b1t, b2t) = (T::lit(b1), T::lit(b2));
    let (c1, c2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));

    let mut lookup: Vec<Option<&Tensor4<T>>> = vec![None; params.len()];
    for (id, g) in grads {
        lookup[id.0] = Some(g);
    }
    for (i, grad) in lookup.into_iter().enumerate() {
        let id = ParamId(i);
        let theta = params.get_mut(id).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..theta.len() {
            let g = grad.map_or(T::zero(), |g| g.data()[j]);
            theta[j] *= decay;
            m[j] = b1t * m[j] + c1 * g;
            v[j] = b2t * v[j] + c2 * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            theta[j] -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `base_lr · (1 − epoch/total_epochs)^power`.
pub fn poly_lr(base_lr: f64, epoch: usize, total_epochs: usize, power: f64) -> f64 {
    debug_assert!(epoch <= total_epochs);
    let frac = 1.0 - epoch as f64 / total_epochs as f64;
    base_lr * frac.max(0.0).powf(power)
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [(ParamId, Tensor4<T>)], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|&v| v.as_f64() * v.as_f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}
