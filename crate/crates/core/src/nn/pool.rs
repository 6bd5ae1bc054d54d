use crate::error::{shape_err, Result};

use super::{Scalar, Tensor};

/// Spatial mean per channel: `N×C×H×W` → `N×C`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let inv = T::one() / T::from_f64(hw as f64);
    Ok(Tensor::from_fn(&[n, c], |i| {
        x.data()[i * hw..(i + 1) * hw].iter().copied().sum::<T>() * inv
    }))
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, c, h, w] = input_shape else {
        return shape_err("global_avg_pool backward expects a 4-D input shape");
    };
    if grad_out.shape() != [n, c] {
        return shape_err("global_avg_pool backward: gradient shape mismatch");
    }
    let hw = h * w;
    let inv = T::one() / T::from_f64(hw as f64);
    Ok(Tensor::from_fn(input_shape, |i| grad_out.data()[i / hw] * inv))
}

/// 3×3 max filter with stride 1. Out-of-bounds cells never win, so borders
/// see only real data.
pub fn maxpool2d_3x3_s1<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let mut out = Tensor::zeros(x.shape());
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data_mut()[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for xx in 0..w {
                let (x0, x1) = (xx.saturating_sub(1), (xx + 1).min(w - 1));
                let mut m = T::neg_infinity();
                for yy in y0..=y1 {
                    for v in &src[yy * w + x0..=yy * w + x1] {
                        m = m.max(*v);
                    }
                }
                dst[y * w + xx] = m;
            }
        }
    }
    Ok(out)
}
