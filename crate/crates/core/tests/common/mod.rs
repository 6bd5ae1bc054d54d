//! Shared helpers for the integration suites.
#![allow(dead_code)]

use spire_core::hrpe::{build_model, HrpeConfig};
use spire_core::nn::*;
use spire_core::rng::SplitMix64;

pub type T64 = Tensor<f64>;

pub const STEP: f64 = 1e-5;
/// Denominator floor for relative error, so exact zeros compare cleanly.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn rand_tensor(rng: &mut SplitMix64, shape: &[usize]) -> T64 {
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
}

/// Values bounded away from zero so ReLU kinks stay out of reach of the step.
pub fn rand_off_zero(rng: &mut SplitMix64, shape: &[usize]) -> T64 {
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform_range(0.05, 1.0);
        if rng.uniform() < 0.5 {
            -m
        } else {
            m
        }
    })
}

fn dot(a: &T64, b: &T64) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Largest relative error between `analytic` and the central difference of
/// `loss` with respect to every entry of `x`.
pub fn max_rel_error(x: &T64, analytic: &T64, loss: impl Fn(&T64) -> f64) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += STEP;
        let mut m = x.clone();
        m.data_mut()[i] -= STEP;
        let num = (loss(&p) - loss(&m)) / (2.0 * STEP);
        worst = worst.max(rel_err(analytic.data()[i], num));
    }
    worst
}

/// Named per-layer worst relative errors. Each layer's scalar loss is
/// `Σ r ⊙ y` for a fixed random `r`, so `r` is the output gradient.
pub fn layer_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = SplitMix64::new(seed);
    let mut out = Vec::new();

    // conv2d, 3×3 stride 2 pad 1 and 1×1
    for (name, k, stride, pad) in [("conv2d 3x3 s2", 3, 2, 1), ("conv2d 3x3 s1", 3, 1, 1), ("conv2d 1x1", 1, 1, 0)] {
        let x = rand_tensor(&mut rng, &[2, 3, 7, 6]);
        let w = rand_tensor(&mut rng, &[4, 3, k, k]);
        let b = rand_tensor(&mut rng, &[4]);
        let y = conv2d(&x, &w, Some(b.data()), stride, pad).unwrap();
        let r = rand_tensor(&mut rng, y.shape());
        let g = conv2d_backward(&x, &w, &r, stride, pad).unwrap();
        let e_x = max_rel_error(&x, &g.input, |x| dot(&conv2d(x, &w, Some(b.data()), stride, pad).unwrap(), &r));
        let e_w = max_rel_error(&w, &g.weight, |w| dot(&conv2d(&x, w, Some(b.data()), stride, pad).unwrap(), &r));
        let gb = Tensor::from_vec(&[4], g.bias.clone()).unwrap();
        let e_b = max_rel_error(&b, &gb, |b| dot(&conv2d(&x, &w, Some(b.data()), stride, pad).unwrap(), &r));
        out.push((name, e_x.max(e_w).max(e_b)));
    }

    for (name, stride) in [("depthwise 3x3 s1", 1), ("depthwise 3x3 s2", 2)] {
        let x = rand_tensor(&mut rng, &[2, 3, 6, 7]);
        let w = rand_tensor(&mut rng, &[3, 1, 3, 3]);
        let y = depthwise_conv2d(&x, &w, stride, 1).unwrap();
        let r = rand_tensor(&mut rng, y.shape());
        let (gx, gw) = depthwise_conv2d_backward(&x, &w, &r, stride, 1).unwrap();
        let e_x = max_rel_error(&x, &gx, |x| dot(&depthwise_conv2d(x, &w, stride, 1).unwrap(), &r));
        let e_w = max_rel_error(&w, &gw, |w| dot(&depthwise_conv2d(&x, w, stride, 1).unwrap(), &r));
        out.push((name, e_x.max(e_w)));
    }

    for (name, mode) in [("batchnorm train", BnMode::Train), ("batchnorm eval", BnMode::Eval)] {
        let x = rand_tensor(&mut rng, &[3, 2, 4, 3]);
        let gamma = rand_tensor(&mut rng, &[2]);
        let beta = rand_tensor(&mut rng, &[2]);
        let running = RunningStats {
            mean: vec![0.1, -0.2],
            var: vec![0.8, 1.3],
        };
        let f = |x: &T64, g: &T64, b: &T64| {
            batchnorm2d_forward(x, g.data(), b.data(), &running, mode, 1e-5).unwrap()
        };
        let fwd = f(&x, &gamma, &beta);
        let r = rand_tensor(&mut rng, fwd.output.shape());
        let g = batchnorm2d_backward(&fwd.cache, gamma.data(), &r).unwrap();
        let e_x = max_rel_error(&x, &g.input, |x| dot(&f(x, &gamma, &beta).output, &r));
        let gg = Tensor::from_vec(&[2], g.gamma.clone()).unwrap();
        let gbeta = Tensor::from_vec(&[2], g.beta.clone()).unwrap();
        let e_g = max_rel_error(&gamma, &gg, |gm| dot(&f(&x, gm, &beta).output, &r));
        let e_b = max_rel_error(&beta, &gbeta, |bt| dot(&f(&x, &gamma, bt).output, &r));
        out.push((name, e_x.max(e_g).max(e_b)));
    }

    {
        let x = rand_off_zero(&mut rng, &[2, 3, 4, 4]);
        let y = relu(&x);
        let r = rand_tensor(&mut rng, y.shape());
        let g = relu_backward(&y, &r).unwrap();
        out.push(("relu", max_rel_error(&x, &g, |x| dot(&relu(x), &r))));
    }
    {
        let x = rand_tensor(&mut rng, &[2, 5]).map(|v| 3.0 * v);
        let y = sigmoid(&x);
        let r = rand_tensor(&mut rng, y.shape());
        let g = sigmoid_backward(&y, &r).unwrap();
        out.push(("sigmoid", max_rel_error(&x, &g, |x| dot(&sigmoid(x), &r))));
    }
    {
        let x = rand_tensor(&mut rng, &[3, 5]);
        let w = rand_tensor(&mut rng, &[4, 5]);
        let b = rand_tensor(&mut rng, &[4]);
        let y = linear(&x, &w, b.data()).unwrap();
        let r = rand_tensor(&mut rng, y.shape());
        let (gx, gw, gb) = linear_backward(&x, &w, &r).unwrap();
        let gb = Tensor::from_vec(&[4], gb).unwrap();
        let e = max_rel_error(&x, &gx, |x| dot(&linear(x, &w, b.data()).unwrap(), &r))
            .max(max_rel_error(&w, &gw, |w| dot(&linear(&x, w, b.data()).unwrap(), &r)))
            .max(max_rel_error(&b, &gb, |b| dot(&linear(&x, &w, b.data()).unwrap(), &r)));
        out.push(("linear", e));
    }
    {
        let x = rand_tensor(&mut rng, &[2, 3, 4, 5]);
        let r = rand_tensor(&mut rng, &[2, 3]);
        let g = global_avg_pool_backward(x.shape(), &r).unwrap();
        out.push(("global avg pool", max_rel_error(&x, &g, |x| dot(&global_avg_pool(x).unwrap(), &r))));
    }
    {
        let x = rand_tensor(&mut rng, &[2, 6, 3, 3]);
        let r = rand_tensor(&mut rng, x.shape());
        let g = channel_shuffle_backward(&r, 2).unwrap();
        out.push(("channel shuffle", max_rel_error(&x, &g, |x| dot(&channel_shuffle(x, 2).unwrap(), &r))));
    }
    {
        let x = rand_tensor(&mut rng, &[2, 6, 3, 3]);
        let (ra, rb) = (rand_tensor(&mut rng, &[2, 2, 3, 3]), rand_tensor(&mut rng, &[2, 4, 3, 3]));
        let g = channel_concat(&ra, &rb).unwrap();
        let e = max_rel_error(&x, &g, |x| {
            let (a, b) = channel_split(x, 2).unwrap();
            dot(&a, &ra) + dot(&b, &rb)
        });
        out.push(("channel split/concat", e));
    }
    {
        let x = rand_tensor(&mut rng, &[2, 3, 4, 4]);
        let s = rand_tensor(&mut rng, &[2, 3]);
        let r = rand_tensor(&mut rng, x.shape());
        let (gx, gs) = scale_channels_backward(&x, &s, &r).unwrap();
        let e = max_rel_error(&x, &gx, |x| dot(&scale_channels(x, &s).unwrap(), &r))
            .max(max_rel_error(&s, &gs, |s| dot(&scale_channels(&x, s).unwrap(), &r)));
        out.push(("channel scaling", e));
    }
    {
        let p = rand_tensor(&mut rng, &[2, 1, 4, 4]);
        let t = rand_tensor(&mut rng, &[2, 1, 4, 4]);
        let (_, g) = mse_loss(&p, &t).unwrap();
        out.push(("mse loss", max_rel_error(&p, &g, |p| mse_loss(p, &t).unwrap().0)));
    }
    out
}

/// Worst relative error over a sampled `fraction` of HRPE parameters, in
/// f64, train-mode BN, MSE loss on a `1×1×32×32` input. Returns `(error, samples)`.
pub fn end_to_end_gradient_error(seed: u64, fraction: f64) -> (f64, usize) {
    let cfg = HrpeConfig::default();
    let mut model = build_model::<f64>(&cfg, seed).unwrap();
    let mut rng = SplitMix64::new(seed ^ 0xabcd);
    let x = rand_tensor(&mut rng, &[1, 1, 32, 32]).map(|v| 0.5 + 0.5 * v);
    let target = Tensor::from_fn(&[1, 1, 8, 8], |_| rng.uniform());
    let loss = |m: &spire_core::hrpe::Hrpe<f64>| {
        let fp = m.forward(&x, BnMode::Train).unwrap();
        mse_loss(&fp.output, &target).unwrap().0
    };
    let fp = model.forward(&x, BnMode::Train).unwrap();
    let (_, g) = mse_loss(&fp.output, &target).unwrap();
    model.params_mut().zero_grad();
    model.backward(fp.tape, &g).unwrap();

    let picks: Vec<_> = {
        let p = model.params();
        p.ids()
            .filter(|&id| p.get(id).trainable)
            .flat_map(|id| (0..p.value(id).len()).map(move |k| (id, k)))
            .filter(|_| rng.uniform() < fraction)
            .collect()
    };
    let mut worst: f64 = 0.0;
    for &(id, k) in &picks {
        let analytic = model.params().grad(id).data()[k];
        let orig = model.params().value(id).data()[k];
        model.params_mut().value_mut(id).data_mut()[k] = orig + STEP;
        let lp = loss(&model);
        model.params_mut().value_mut(id).data_mut()[k] = orig - STEP;
        let lm = loss(&model);
        model.params_mut().value_mut(id).data_mut()[k] = orig;
        worst = worst.max(rel_err(analytic, (lp - lm) / (2.0 * STEP)));
    }
    (worst, picks.len())
}
