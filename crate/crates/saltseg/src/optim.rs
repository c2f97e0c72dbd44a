//! ADADELTA parameter updates: per-parameter running averages of squared
//! gradients and squared updates, no fixed global learning rate.

use crate::error::{Result, SaltError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdadeltaParams {
    pub rho: f64,
    pub eps: f64,
    pub lr_scale: f64,
}

impl Default for AdadeltaParams {
    fn default() -> Self {
        AdadeltaParams {
            rho: 0.95,
            eps: 1e-6,
            lr_scale: 0.01,
        }
    }
}

/// Accumulators for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamState {
    pub acc_grad_sq: Tensor,
    pub acc_update_sq: Tensor,
}

impl ParamState {
    pub fn zeros_like(param: &Tensor) -> Self {
        ParamState {
            acc_grad_sq: Tensor::zeros(param.dims()),
            acc_update_sq: Tensor::zeros(param.dims()),
        }
    }
}

/// Accumulators for every parameter of a model, in parameter order, plus the
/// shared hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdadeltaParams,
    pub slots: Vec<ParamState>,
}

impl OptimizerState {
    pub fn new(hyper: AdadeltaParams, params: &[&Tensor]) -> Self {
        OptimizerState {
            hyper,
            slots: params.iter().map(|p| ParamState::zeros_like(p)).collect(),
        }
    }
}

/// One ADADELTA update:
///   acc_g <- rho*acc_g + (1-rho)*g^2
///   delta  = -sqrt(acc_d + eps)/sqrt(acc_g + eps) * g
///   acc_d <- rho*acc_d + (1-rho)*delta^2
///   param <- param + lr_scale*delta
pub fn adadelta_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut ParamState,
    hyper: &AdadeltaParams,
) -> Result<()> {
    if !param.same_dims(grad) {
        return Err(SaltError::Shape(format!(
            "grad dims {:?} do not match param dims {:?}",
            grad.dims(),
            param.dims()
        )));
    }
    if !grad.is_finite() {
        return Err(SaltError::Numeric("non-finite gradient".into()));
    }
    let (rho, eps, lr) = (hyper.rho, hyper.eps, hyper.lr_scale);
    let acc_g = state.acc_grad_sq.data_mut();
    let acc_d = state.acc_update_sq.data_mut();
    let p = param.data_mut();
    for i in 0..p.len() {
        let g = grad.data()[i];
        acc_g[i] = rho * acc_g[i] + (1.0 - rho) * g * g;
        let delta = -((acc_d[i] + eps).sqrt() / (acc_g[i] + eps).sqrt()) * g;
        acc_d[i] = rho * acc_d[i] + (1.0 - rho) * delta * delta;
        p[i] += lr * delta;
    }
    Ok(())
}
