//! Channel-axis plumbing for the split / process / shuffle units.

use crate::error::{shape_err, Error, Result};

use super::{Scalar, Tensor};

/// Splits channels into `[0, at)` and `[at, C)`.
pub fn channel_split<T: Scalar>(x: &Tensor<T>, at: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if at == 0 || at >= c {
        return Err(Error::InvalidArgument(format!(
            "channel_split point {at} must lie in (0, {c})"
        )));
    }
    let hw = h * w;
    let mut a = Vec::with_capacity(n * at * hw);
    let mut b = Vec::with_capacity(n * (c - at) * hw);
    for s in x.data().chunks_exact(c * hw) {
        a.extend_from_slice(&s[..at * hw]);
        b.extend_from_slice(&s[at * hw..]);
    }
    Ok((
        Tensor::from_vec(&[n, at, h, w], a)?,
        Tensor::from_vec(&[n, c - at, h, w], b)?,
    ))
}

/// Inverse of [`channel_split`]; also its backward pass.
pub fn channel_concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return shape_err(format!("channel_concat: {:?} vs {:?}", a.shape(), b.shape()));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * (ca + cb) * hw);
    for (sa, sb) in a.data().chunks_exact(ca * hw).zip(b.data().chunks_exact(cb * hw)) {
        out.extend_from_slice(sa);
        out.extend_from_slice(sb);
    }
    Tensor::from_vec(&[n, ca + cb, h, w], out)
}

/// Destination index of source channel `src` under a `groups`-way shuffle.
pub fn shuffle_target(src: usize, channels: usize, groups: usize) -> usize {
    let per_group = channels / groups;
    let (g, i) = (src / per_group, src % per_group);
    i * groups + g
}

fn permute<T: Scalar>(x: &Tensor<T>, groups: usize, inverse: bool) -> Result<Tensor<T>> {
    let (_, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::InvalidArgument(format!(
            "channel_shuffle: {c} channels not divisible into {groups} groups"
        )));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    for (src, dst) in x.data().chunks_exact(c * hw).zip(out.data_mut().chunks_exact_mut(c * hw)) {
        for ch in 0..c {
            let to = shuffle_target(ch, c, groups);
            let (from, to) = if inverse { (to, ch) } else { (ch, to) };
            dst[to * hw..(to + 1) * hw].copy_from_slice(&src[from * hw..(from + 1) * hw]);
        }
    }
    Ok(out)
}

/// Reshape-transpose channel interleave: channel `g·(C/groups) + i` moves to `i·groups + g`.
pub fn channel_shuffle<T: Scalar>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    permute(x, groups, false)
}

pub fn channel_shuffle_backward<T: Scalar>(grad_out: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    permute(grad_out, groups, true)
}

/// Multiplies every plane `(n, c)` of `x` by `scale[n, c]`.
pub fn scale_channels<T: Scalar>(x: &Tensor<T>, scale: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if scale.shape() != [n, c] {
        return shape_err(format!("scale_channels: scale {:?} for input {:?}", scale.shape(), x.shape()));
    }
    let hw = h * w;
    Ok(Tensor::from_fn(x.shape(), |i| x.data()[i] * scale.data()[i / hw]))
}

/// Returns `(grad_x, grad_scale)`.
pub fn scale_channels_backward<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    x.check_same_shape(grad_out)?;
    let (_, _, h, w) = x.dims4()?;
    let hw = h * w;
    let dx = Tensor::from_fn(x.shape(), |i| grad_out.data()[i] * scale.data()[i / hw]);
    let ds = Tensor::from_fn(scale.shape(), |p| {
        let r = p * hw..(p + 1) * hw;
        x.data()[r.clone()]
            .iter()
            .zip(&grad_out.data()[r])
            .map(|(&a, &b)| a * b)
            .sum()
    });
    Ok((dx, ds))
}
