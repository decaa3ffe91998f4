//! Soft-IoU segmentation loss.
//!
//! Per batch item, with `p` the predicted probabilities and `t` the binary
//! target: `1 − (Σpt + s) / (Σp + Σt − Σpt + s)`. The batch loss is the mean.

use crate::tensor::{ensure_dim, Axis, Scalar, Tensor4, TensorError};

/// Default smoothing constant; keeps empty-mask images finite.
pub const DEFAULT_SMOOTH: f64 = 1.0;

fn check<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<(), TensorError> {
    for axis in Axis::ALL {
        ensure_dim("soft_iou_loss", axis, pred.shape().dim(axis), target.shape().dim(axis))?;
    }
    Ok(())
}

/// (intersection, prediction mass, target mass) for batch item `n`.
fn sums<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>, n: usize) -> (T, T, T) {
    let mut inter = T::zero();
    let mut p_sum = T::zero();
    let mut t_sum = T::zero();
    for (&p, &t) in pred.item(n).iter().zip(target.item(n)) {
        inter += p * t;
        p_sum += p;
        t_sum += t;
    }
    (inter, p_sum, t_sum)
}

pub fn soft_iou_loss<T: Scalar>(
    pred: &Tensor4<T>,
    target: &Tensor4<T>,
    smooth: T,
) -> Result<T, TensorError> {
    soft_iou_value(pred, target, smooth)
}

pub(crate) fn soft_iou_value<T: Scalar>(
    pred: &Tensor4<T>,
    target: &Tensor4<T>,
    smooth: T,
) -> Result<T, TensorError> {
    check(pred, target)?;
    let batch = pred.shape().n;
    let mut total = T::zero();
    for n in 0..batch {
        let (i, p, t) = sums(pred, target, n);
        total += T::one() - (i + smooth) / (p + t - i + smooth);
    }
    Ok(total / T::lit(batch as f64))
}

/// Gradient of the batch loss with respect to `pred`, scaled by `upstream`.
pub(crate) fn soft_iou_grad<T: Scalar>(
    pred: &Tensor4<T>,
    target: &Tensor4<T>,
    smooth: T,
    upstream: T,
) -> Result<Tensor4<T>, TensorError> {
    check(pred, target)?;
    let shape = pred.shape();
    let batch = T::lit(shape.n as f64);
    let mut grad = Tensor4::zeros(shape);
    let len = shape.c * shape.plane();
    for n in 0..shape.n {
        let (i, p, t) = sums(pred, target, n);
        let num = i + smooth;
        let den = p + t - i + smooth;
        let scale = -upstream / (batch * den * den);
        let dst = &mut grad.data_mut()[n * len..(n + 1) * len];
        for (g, &tj) in dst.iter_mut().zip(target.item(n)) {
            // d(num/den)/dp_j = (t_j·den − num·(1 − t_j)) / den²
            *g = scale * (tj * den - num * (T::one() - tj));
        }
    }
    Ok(grad)
}
