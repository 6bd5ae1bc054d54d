use std::time::Instant;

use serde::Serialize;

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::hrpe::{build_model, HrpeConfig, HrpeF};
use crate::nn::{adam_step, mse_loss, AdamState, BnMode, PlateauScheduler, TensorF};
use crate::prps::{build_supervision_map, PrpsConfig};
use crate::rng::{splitmix64, SplitMix64};
use crate::scene::Sample;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Equal to `train_loss` when there is no validation split.
    pub val_loss: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub model: HrpeF,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub seconds: f64,
}

/// An input image with its supervision map, and the mirrored pair.
struct Example {
    image: TensorF,
    target: TensorF,
    flipped: Option<(TensorF, TensorF)>,
}

fn hflip(t: &TensorF) -> TensorF {
    let w = *t.shape().last().unwrap();
    TensorF::from_fn(t.shape(), |i| t.data()[i - i % w + (w - 1 - i % w)])
}

fn example(s: &Sample, prps: &PrpsConfig, with_flip: bool) -> Result<Example> {
    let target = build_supervision_map(&s.image, &s.centroids, prps)?.grid;
    let flipped = if with_flip {
        let w = s.width() as f64;
        let pts: Vec<(f64, f64)> = s.centroids.iter().map(|&(x, y)| (w - 1.0 - x, y)).collect();
        let img = hflip(&s.image);
        let t = build_supervision_map(&img, &pts, prps)?.grid;
        Some((img, t))
    } else {
        None
    };
    Ok(Example {
        image: s.image.clone(),
        target,
        flipped,
    })
}

fn stack<'a>(items: impl ExactSizeIterator<Item = &'a TensorF>) -> Result<TensorF> {
    let n = items.len();
    let mut shape = Vec::new();
    let mut data = Vec::new();
    for t in items {
        if shape.is_empty() {
            shape = t.shape().to_vec();
        } else if shape != t.shape() {
            return Err(Error::Shape("cannot batch samples of different sizes".into()));
        }
        data.extend_from_slice(t.data());
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    TensorF::from_vec(&[n, 1, h, w], data)
}

/// Mean squared error of the eval-mode model over `set`, batch by batch.
fn eval_loss(model: &HrpeF, set: &[Example], batch: usize) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for chunk in set.chunks(batch) {
        let x = stack(chunk.iter().map(|e| &e.image))?;
        let y = stack(chunk.iter().map(|e| &e.target))?;
        let (loss, _) = mse_loss(&model.infer(&x)?, &y)?;
        sum += loss as f64 * y.len() as f64;
        count += y.len();
    }
    Ok(sum / count as f64)
}

/// Number of trailing training samples held out for validation.
pub fn validation_count(n: usize, fraction: f64) -> usize {
    if fraction <= 0.0 || n < 2 {
        return 0;
    }
    ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
}

/// Adam on MSE against supervision maps built on the fly, with plateau
/// learning-rate decay driven by validation loss. `on_epoch` sees each log row.
pub fn train_model(
    samples: &[Sample],
    prps: &PrpsConfig,
    model_cfg: &HrpeConfig,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    tc.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let prps = PrpsConfig {
        stride: model_cfg.stride,
        ..prps.clone()
    };
    let n_val = validation_count(samples.len(), tc.val_fraction);
    let (fit, val) = samples.split_at(samples.len() - n_val);
    let fit: Vec<Example> = fit.iter().map(|s| example(s, &prps, tc.hflip)).collect::<Result<_>>()?;
    let val: Vec<Example> = val.iter().map(|s| example(s, &prps, false)).collect::<Result<_>>()?;

    let start = Instant::now();
    let mut model = build_model::<f32>(model_cfg, tc.seed)?;
    let mut adam = AdamState::new(model.params(), tc.lr);
    let mut sched = PlateauScheduler::new(tc.plateau_factor, tc.plateau_patience);
    let mut rng = SplitMix64::new(splitmix64(tc.seed ^ 0x7472_6169_6e00));
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut best: Option<(f64, usize, HrpeF)> = None;
    let mut log = Vec::with_capacity(tc.epochs);

    for epoch in 1..=tc.epochs {
        rng.shuffle(&mut order);
        let (mut sum, mut count) = (0.0, 0usize);
        for idx in order.chunks(tc.batch_size) {
            let picks: Vec<(&TensorF, &TensorF)> = idx
                .iter()
                .map(|&i| {
                    let e = &fit[i];
                    match &e.flipped {
                        Some((img, t)) if rng.uniform() < 0.5 => (img, t),
                        _ => (&e.image, &e.target),
                    }
                })
                .collect();
            let x = stack(picks.iter().map(|p| p.0))?;
            let y = stack(picks.iter().map(|p| p.1))?;
            let fp = model.forward(&x, BnMode::Train)?;
            let (loss, grad) = mse_loss(&fp.output, &y)?;
            let loss = loss as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch} (lr {}); lower train.lr",
                    adam.lr
                )));
            }
            model.commit_bn_updates(fp.bn_updates);
            model.params_mut().zero_grad();
            model.backward(fp.tape, &grad)?;
            adam_step(model.params_mut(), &mut adam)?;
            sum += loss * y.len() as f64;
            count += y.len();
        }
        let train_loss = sum / count as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            eval_loss(&model, &val, tc.batch_size)?
        };
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite validation loss at epoch {epoch}")));
        }
        let row = EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr: adam.lr,
        };
        on_epoch(&row);
        log.push(row);
        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, epoch, model.clone()));
        }
        sched.observe(val_loss, &mut adam.lr);
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn write_train_log(path: &std::path::Path, log: &[EpochLog]) -> Result<()> {
    let mut text = String::from("epoch,train_loss,val_loss,lr\n");
    for r in log {
        text.push_str(&format!("{},{:.9},{:.9},{:e}\n", r.epoch, r.train_loss, r.val_loss, r.lr));
    }
    std::fs::write(path, text)?;
    Ok(())
}
