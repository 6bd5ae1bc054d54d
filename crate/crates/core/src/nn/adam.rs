use crate::error::{Error, Result};

use super::{ParamStore, Scalar, Tensor};

/// Adam moments and hyper-parameters for one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros = |p: &super::Param<T>| Tensor::zeros(p.value.shape());
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: store.iter().map(zeros).collect(),
            second: store.iter().map(zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of every trainable parameter.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
    let shapes_ok = state.first.len() == store.len()
        && store
            .iter()
            .zip(&state.first)
            .all(|(p, m)| p.value.shape() == m.shape());
    if !shapes_ok {
        return Err(Error::InvalidArgument(
            "Adam state was not initialized for this parameter store".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
    let step_size = T::from_f64(state.lr / c1);
    let inv_c2_sqrt = T::from_f64(1.0 / c2.sqrt());
    let eps = T::from_f64(state.eps);
    for ((p, m), v) in store.iter_mut().zip(&mut state.first).zip(&mut state.second) {
        if !p.trainable {
            continue;
        }
        let iter = p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((w, &g), (mi, vi)) in iter {
            *mi = b1t * *mi + one_b1 * g;
            *vi = b2t * *vi + one_b2 * g * g;
            *w = *w - step_size * *mi / (vi.sqrt() * inv_c2_sqrt + eps);
        }
    }
    Ok(())
}

/// Multiplies the learning rate by `factor` once the monitored loss has failed
/// to improve (relative threshold) for more than `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            threshold: 1e-4,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Feeds one epoch's loss; returns the new learning rate when it was reduced.
    pub fn observe(&mut self, loss: f64, lr: &mut f64) -> Option<f64> {
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.bad_epochs = 0;
            return None;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            *lr *= self.factor;
            self.bad_epochs = 0;
            return Some(*lr);
        }
        None
    }
}
