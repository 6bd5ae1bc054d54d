//! Per-channel batch normalization over N, H and W.

use crate::error::{shape_err, Error, Result};

use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running mean and (unbiased) variance, updated only in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// `stat ← (1 − momentum)·stat + momentum·batch`.
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: T) {
        let keep = T::one() - momentum;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + momentum * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var_unbiased) {
            *r = keep * *r + momentum * b;
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    mode: BnMode,
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct BnForward<T> {
    pub output: Tensor<T>,
    pub cache: BnCache<T>,
    /// Present in train mode; the caller decides when to fold it into running stats.
    pub batch: Option<BatchStats<T>>,
}

fn check<T: Scalar>(input: &Tensor<T>, gamma: &[T], beta: &[T], eps: T) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    if gamma.len() != c || beta.len() != c {
        return shape_err(format!(
            "batchnorm: {c} channels but gamma/beta have {}/{}",
            gamma.len(),
            beta.len()
        ));
    }
    if !(eps > T::zero()) {
        return Err(Error::InvalidArgument("batchnorm eps must be > 0".into()));
    }
    Ok((n, c, h * w))
}

/// Pure forward pass; running statistics are read but never written.
pub fn batchnorm2d_forward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running: &RunningStats<T>,
    mode: BnMode,
    eps: T,
) -> Result<BnForward<T>> {
    let (n, c, hw) = check(input, gamma, beta, eps)?;
    let count = n * hw;
    let x = input.data();
    let (mean, var, batch) = match mode {
        BnMode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s = s + x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
                }
                let m = s / T::from_f64(count as f64);
                let mut v = T::zero();
                for b in 0..n {
                    for &xv in &x[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                        v = v + (xv - m) * (xv - m);
                    }
                }
                mean[ch] = m;
                var[ch] = v / T::from_f64(count as f64);
            }
            let unbiased = if count > 1 {
                let scale = T::from_f64(count as f64 / (count - 1) as f64);
                var.iter().map(|&v| v * scale).collect()
            } else {
                var.clone()
            };
            let batch = BatchStats {
                mean: mean.clone(),
                var_unbiased: unbiased,
            };
            (mean, var, Some(batch))
        }
        BnMode::Eval => {
            if running.mean.len() != c || running.var.len() != c {
                return shape_err("batchnorm: running stats channel count mismatch");
            }
            (running.mean.clone(), running.var.clone(), None)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for i in range {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[i] = xh;
                out.data_mut()[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    Ok(BnForward {
        output: out,
        cache: BnCache { mode, xhat, inv_std },
        batch,
    })
}

/// Forward pass that also folds batch statistics into `running` in train mode.
pub fn batchnorm2d<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running: &mut RunningStats<T>,
    mode: BnMode,
    momentum: T,
    eps: T,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let fwd = batchnorm2d_forward(input, gamma, beta, running, mode, eps)?;
    if let Some(batch) = &fwd.batch {
        running.update(batch, momentum);
    }
    Ok((fwd.output, fwd.cache))
}

#[derive(Debug, Clone)]
pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn batchnorm2d_backward<T: Scalar>(cache: &BnCache<T>, gamma: &[T], grad_out: &Tensor<T>) -> Result<BnGrads<T>> {
    cache.xhat.check_same_shape(grad_out)?;
    let (n, c, h, w) = grad_out.dims4()?;
    let hw = h * w;
    let m = T::from_f64((n * hw) as f64);
    let dy = grad_out.data();
    let xh = cache.xhat.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                dgamma[ch] = dgamma[ch] + dy[i] * xh[i];
                dbeta[ch] = dbeta[ch] + dy[i];
            }
        }
    }
    let mut dx = Tensor::zeros(grad_out.shape());
    for b in 0..n {
        for ch in 0..c {
            let k = gamma[ch] * cache.inv_std[ch];
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                dx.data_mut()[i] = match cache.mode {
                    // Σ dxhat = γ·Σdy and Σ dxhat·xhat = γ·Σdy·xhat.
                    BnMode::Train => k * (dy[i] - (dbeta[ch] + xh[i] * dgamma[ch]) / m),
                    BnMode::Eval => k * dy[i],
                };
            }
        }
    }
    Ok(BnGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    })
}
