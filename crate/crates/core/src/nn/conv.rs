//! Dense and depthwise 2-D cross-correlation with zero padding.

use crate::error::{shape_err, Result};

use super::{Scalar, Tensor};

/// Spatial geometry shared by forward and backward passes.
#[derive(Debug, Clone, Copy)]
struct Geom {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return shape_err("stride must be >= 1");
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return shape_err(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            ));
        }
        Ok(Self {
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Input coordinate for output index `o` and kernel tap `k`, if inside.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let p = (o * stride + k) as isize - pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

/// Output spatial extent `⌊(n + 2·pad − k)/stride⌋ + 1`.
pub fn conv_output_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

fn im2col<T: Scalar>(x: &[T], c: usize, g: &Geom, cols: &mut [T]) {
    let p = g.ho * g.wo;
    for ci in 0..c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let sy = Geom::src(oy, ky, g.stride, g.pad, g.h);
                    for ox in 0..g.wo {
                        dst[oy * g.wo + ox] = match (sy, Geom::src(ox, kx, g.stride, g.pad, g.w)) {
                            (Some(y), Some(xx)) => plane[y * g.w + xx],
                            _ => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, g: &Geom, dx: &mut [T]) {
    let p = g.ho * g.wo;
    for ci in 0..c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let Some(y) = Geom::src(oy, ky, g.stride, g.pad, g.h) else {
                        continue;
                    };
                    for ox in 0..g.wo {
                        if let Some(xx) = Geom::src(ox, kx, g.stride, g.pad, g.w) {
                            plane[y * g.w + xx] = plane[y * g.w + xx] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_conv<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, Geom)> {
    let (n, c, h, w) = input.dims4()?;
    let (oc, ic, kh, kw) = weight.dims4()?;
    if ic != c {
        return shape_err(format!(
            "conv2d: input has {c} channels but weight expects {ic}"
        ));
    }
    if let Some(b) = bias {
        if b.len() != oc {
            return shape_err(format!("conv2d: bias has {} entries, expected {oc}", b.len()));
        }
    }
    Ok((n, c, oc, Geom::new(h, w, kh, kw, stride, pad)?))
}

/// Cross-correlation of an NCHW input with an `OC×IC×kh×kw` kernel.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, c, oc, g) = check_conv(input, weight, bias, stride, pad)?;
    let k = c * g.kh * g.kw;
    let p = g.ho * g.wo;
    let mut out = Tensor::zeros(&[n, oc, g.ho, g.wo]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    let in_len = c * g.h * g.w;
    for b in 0..n {
        let x = &input.data()[b * in_len..(b + 1) * in_len];
        let dst = &mut out.data_mut()[b * oc * p..(b + 1) * oc * p];
        if let Some(bias) = bias {
            for (o, row) in dst.chunks_exact_mut(p).enumerate() {
                row.fill(bias[o]);
            }
        }
        let src: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(x, c, &g, &mut cols);
            &cols
        };
        T::gemm(oc, k, p, weight.data(), false, src, false, T::one(), dst);
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its inputs.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<T>> {
    let (n, c, oc, g) = check_conv(input, weight, None, stride, pad)?;
    if grad_out.shape() != [n, oc, g.ho, g.wo] {
        return shape_err(format!(
            "conv2d backward: grad shape {:?}, expected {:?}",
            grad_out.shape(),
            [n, oc, g.ho, g.wo]
        ));
    }
    let k = c * g.kh * g.kw;
    let p = g.ho * g.wo;
    let in_len = c * g.h * g.w;
    let mut dx = Tensor::zeros(input.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = vec![T::zero(); oc];
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    for b in 0..n {
        let x = &input.data()[b * in_len..(b + 1) * in_len];
        let go = &grad_out.data()[b * oc * p..(b + 1) * oc * p];
        for (o, row) in go.chunks_exact(p).enumerate() {
            db[o] = db[o] + row.iter().copied().sum::<T>();
        }
        let src: &[T] = if pointwise {
            x
        } else {
            im2col(x, c, &g, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        T::gemm(oc, p, k, go, false, src, true, T::one(), dw.data_mut());
        // dcols = Wᵀ · dY
        let dxs = &mut dx.data_mut()[b * in_len..(b + 1) * in_len];
        if pointwise {
            T::gemm(k, oc, p, weight.data(), true, go, false, T::zero(), dxs);
        } else {
            T::gemm(k, oc, p, weight.data(), true, go, false, T::zero(), &mut dcols);
            col2im(&dcols, c, &g, dxs);
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

fn check_depthwise<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, Geom)> {
    let (n, c, h, w) = input.dims4()?;
    let (wc, one, kh, kw) = weight.dims4()?;
    if wc != c || one != 1 {
        return shape_err(format!(
            "depthwise conv: input has {c} channels, weight is {:?} (expected {c}x1xKxK)",
            weight.shape()
        ));
    }
    Ok((n, c, Geom::new(h, w, kh, kw, stride, pad)?))
}

/// One `kh×kw` kernel per channel; channel `c` of the output reads only channel `c`.
pub fn depthwise_conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, c, g) = check_depthwise(input, weight, stride, pad)?;
    let mut out = Tensor::zeros(&[n, c, g.ho, g.wo]);
    let (hw, p, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    for b in 0..n {
        for ch in 0..c {
            let x = &input.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            let k = &weight.data()[ch * kk..(ch + 1) * kk];
            let y = &mut out.data_mut()[(b * c + ch) * p..(b * c + ch + 1) * p];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = T::zero();
                    for ky in 0..g.kh {
                        let Some(sy) = Geom::src(oy, ky, g.stride, g.pad, g.h) else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            if let Some(sx) = Geom::src(ox, kx, g.stride, g.pad, g.w) {
                                acc = acc + k[ky * g.kw + kx] * x[sy * g.w + sx];
                            }
                        }
                    }
                    y[oy * g.wo + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_weight)`.
pub fn depthwise_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, g) = check_depthwise(input, weight, stride, pad)?;
    if grad_out.shape() != [n, c, g.ho, g.wo] {
        return shape_err("depthwise conv backward: gradient shape mismatch");
    }
    let mut dx = Tensor::zeros(input.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let (hw, p, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    for b in 0..n {
        for ch in 0..c {
            let x = &input.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            let k = &weight.data()[ch * kk..(ch + 1) * kk];
            let gy = &grad_out.data()[(b * c + ch) * p..(b * c + ch + 1) * p];
            let dk = &mut dw.data_mut()[ch * kk..(ch + 1) * kk];
            let dxp = &mut dx.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let go = gy[oy * g.wo + ox];
                    for ky in 0..g.kh {
                        let Some(sy) = Geom::src(oy, ky, g.stride, g.pad, g.h) else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            if let Some(sx) = Geom::src(ox, kx, g.stride, g.pad, g.w) {
                                let t = ky * g.kw + kx;
                                let s = sy * g.w + sx;
                                dk[t] = dk[t] + go * x[s];
                                dxp[s] = dxp[s] + go * k[t];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw))
}
