use crate::error::Result;

use super::{Scalar, Tensor};

/// Mean squared error over every element, with its gradient `2(pred − target)/N`.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    pred.check_same_shape(target)?;
    let n = T::from_f64(pred.len() as f64);
    let two = T::from_f64(2.0);
    let mut grad = Tensor::zeros(pred.shape());
    let mut sum = T::zero();
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        sum = sum + d * d;
        *g = two * d / n;
    }
    Ok((sum / n, grad))
}
