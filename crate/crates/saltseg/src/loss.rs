//! Sigmoid cross-entropy reduce-mean loss with its analytic gradient.

use crate::error::{Result, SaltError};
use crate::ops::sigmoid_scalar;
use crate::tensor::Tensor;

/// How the elementwise losses are reduced to the scalar loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Mean over all batch elements and pixels (default).
    MeanAll,
    /// Sum over pixels, mean over batch elements only.
    MeanBatch,
}

#[derive(Debug, Clone)]
pub struct LossValue {
    pub mean_loss: f64,
    pub per_pixel: Tensor,
}

fn check_pair(logits: &Tensor, targets: &Tensor) -> Result<()> {
    if !logits.same_dims(targets) {
        return Err(SaltError::Shape(format!(
            "logits dims {:?} vs targets dims {:?}",
            logits.dims(),
            targets.dims()
        )));
    }
    if let Some(bad) = targets.data().iter().find(|&&z| z != 0.0 && z != 1.0) {
        return Err(SaltError::Validation(format!(
            "target value {bad} is not in {{0, 1}}"
        )));
    }
    Ok(())
}

/// Elementwise loss in the overflow-free form max(x,0) - x*z + log(1+e^{-|x|}).
pub fn sigmoid_cross_entropy_scalar(x: f64, z: f64) -> f64 {
    x.max(0.0) - x * z + (-x.abs()).exp().ln_1p()
}

/// Elementwise sigmoid cross-entropy of pre-sigmoid logits against {0,1}
/// targets. Finite and non-negative for any finite logit.
pub fn sigmoid_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    check_pair(logits, targets)?;
    let data = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&x, &z)| sigmoid_cross_entropy_scalar(x, z))
        .collect();
    Tensor::new(logits.dims().to_vec(), data)
}

/// Scalar loss plus its gradient with respect to the logits.
///
/// With mean-over-all reduction the gradient is (sigmoid(x) - z) / (m*n);
/// with batch-only reduction the divisor is m.
pub fn loss_and_grad(
    logits: &Tensor,
    targets: &Tensor,
    reduction: Reduction,
) -> Result<(LossValue, Tensor)> {
    check_pair(logits, targets)?;
    if logits.is_empty() {
        return Err(SaltError::Validation("empty batch".into()));
    }
    let per_pixel = sigmoid_cross_entropy(logits, targets)?;
    let batch = if logits.rank() >= 1 { logits.dims()[0] } else { 1 };
    let divisor = match reduction {
        Reduction::MeanAll => logits.len() as f64,
        Reduction::MeanBatch => batch as f64,
    };
    let mean_loss = per_pixel.sum() / divisor;
    let grad = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&x, &z)| (sigmoid_scalar(x) - z) / divisor)
        .collect();
    Ok((
        LossValue {
            mean_loss,
            per_pixel,
        },
        Tensor::new(logits.dims().to_vec(), grad)?,
    ))
}
