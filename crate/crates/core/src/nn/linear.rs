use crate::error::{shape_err, Result};

use super::{Scalar, Tensor};

/// Fully connected layer: `x: N×in`, `weight: out×in`, `bias: out` → `N×out`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let (n, inp, out) = check(x, weight)?;
    if bias.len() != out {
        return shape_err(format!("linear: bias has {} entries, expected {out}", bias.len()));
    }
    let mut y = Tensor::from_fn(&[n, out], |i| bias[i % out]);
    T::gemm(n, inp, out, x.data(), false, weight.data(), true, T::one(), y.data_mut());
    Ok(y)
}

/// Returns `(grad_x, grad_weight, grad_bias)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let (n, inp, out) = check(x, weight)?;
    if grad_out.shape() != [n, out] {
        return shape_err("linear backward: gradient shape mismatch");
    }
    let mut dx = Tensor::zeros(&[n, inp]);
    T::gemm(n, out, inp, grad_out.data(), false, weight.data(), false, T::zero(), dx.data_mut());
    let mut dw = Tensor::zeros(&[out, inp]);
    T::gemm(out, n, inp, grad_out.data(), true, x.data(), false, T::zero(), dw.data_mut());
    let mut db = vec![T::zero(); out];
    for row in grad_out.data().chunks_exact(out) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d = *d + g;
        }
    }
    Ok((dx, dw, db))
}

fn check<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (&[n, inp], &[out, win]) = (x.shape(), weight.shape()) else {
        return shape_err(format!(
            "linear expects 2-D input and weight, got {:?} and {:?}",
            x.shape(),
            weight.shape()
        ));
    };
    if inp != win {
        return shape_err(format!("linear: input width {inp} vs weight width {win}"));
    }
    Ok((n, inp, out))
}
