use super::config::HrpeConfig;
use super::graph::{block_specs, BlockKind};
use crate::error::{shape_err, Error, Result};
use crate::nn::{
    batchnorm2d_backward, batchnorm2d_forward, channel_concat, channel_shuffle, channel_shuffle_backward,
    channel_split, conv2d, conv2d_backward, depthwise_conv2d, depthwise_conv2d_backward, global_avg_pool,
    global_avg_pool_backward, linear, linear_backward, relu, relu_backward, scale_channels,
    scale_channels_backward, sigmoid, sigmoid_backward, BatchStats, BnCache, BnMode, ParamId, ParamStore,
    RunningStats, Scalar, Tensor, TensorF,
};
use crate::prps::ResponseMap;
use crate::rng::SplitMix64;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct Bn {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    conv: Conv,
    bn: Bn,
    relu: bool,
}

#[derive(Debug, Clone, Copy)]
struct Dw {
    w: ParamId,
    bn: Bn,
}

#[derive(Debug, Clone, Copy)]
struct Se {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
enum Block {
    Conv(ConvBn),
    Bottleneck { a: ConvBn, b: ConvBn, c: ConvBn, proj: ConvBn },
    Reorg { channels: usize, dws: Vec<Dw>, se: Option<Se> },
    Head(Conv),
}

struct ConvBnTape<T> {
    input: Tensor<T>,
    bn: BnCache<T>,
    /// Post-ReLU output; only kept when the layer has a ReLU.
    out: Option<Tensor<T>>,
}

struct SeTape<T> {
    x: Tensor<T>,
    pooled: Tensor<T>,
    hidden: Tensor<T>,
    scale: Tensor<T>,
}

enum BlockTape<T> {
    Conv(ConvBnTape<T>),
    Bottleneck {
        a: ConvBnTape<T>,
        b: ConvBnTape<T>,
        c: ConvBnTape<T>,
        proj: ConvBnTape<T>,
        out: Option<Tensor<T>>,
    },
    Reorg {
        dws: Vec<(Tensor<T>, BnCache<T>)>,
        se: Option<SeTape<T>>,
    },
    Head {
        input: Tensor<T>,
    },
}

/// Activations recorded by a training forward pass, consumed by [`Hrpe::backward`].
pub struct Tape<T>(Vec<BlockTape<T>>);

/// Batch statistics gathered by a train-mode forward, not yet folded into
/// the running estimates.
pub struct BnUpdates<T>(Vec<(Bn, BatchStats<T>)>);

pub struct ForwardPass<T> {
    pub output: Tensor<T>,
    pub tape: Tape<T>,
    pub bn_updates: BnUpdates<T>,
}

/// The high-resolution encoder: a single chain from the image to a
/// one-channel map at stride `s`.
#[derive(Debug, Clone)]
pub struct Hrpe<T> {
    cfg: HrpeConfig,
    store: ParamStore<T>,
    blocks: Vec<Block>,
}

pub type HrpeF = Hrpe<f32>;

struct Builder<T> {
    store: ParamStore<T>,
}

impl<T: Scalar> Builder<T> {
    fn conv(&mut self, name: &str, ic: usize, oc: usize, k: usize, stride: usize) -> Result<Conv> {
        Ok(Conv {
            w: self.store.add(format!("{name}.weight"), Tensor::zeros(&[oc, ic, k, k]), true)?,
            b: self.store.add(format!("{name}.bias"), Tensor::zeros(&[oc]), true)?,
            stride,
            pad: k / 2,
        })
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<Bn> {
        Ok(Bn {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::full(&[c], T::one()), true)?,
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(&[c]), true)?,
            mean: self.store.add(format!("{name}.running_mean"), Tensor::zeros(&[c]), false)?,
            var: self.store.add(format!("{name}.running_var"), Tensor::full(&[c], T::one()), false)?,
        })
    }

    fn conv_bn(&mut self, name: &str, ic: usize, oc: usize, k: usize, stride: usize, relu: bool) -> Result<ConvBn> {
        Ok(ConvBn {
            conv: self.conv(&format!("{name}.conv"), ic, oc, k, stride)?,
            bn: self.bn(&format!("{name}.bn"), oc)?,
            relu,
        })
    }

    fn dw(&mut self, name: &str, c: usize) -> Result<Dw> {
        Ok(Dw {
            w: self.store.add(format!("{name}.weight"), Tensor::zeros(&[c, 1, 3, 3]), true)?,
            bn: self.bn(&format!("{name}.bn"), c)?,
        })
    }

    fn se(&mut self, name: &str, c: usize, hidden: usize) -> Result<Se> {
        Ok(Se {
            w1: self.store.add(format!("{name}.fc1.weight"), Tensor::zeros(&[hidden, c]), true)?,
            b1: self.store.add(format!("{name}.fc1.bias"), Tensor::zeros(&[hidden]), true)?,
            w2: self.store.add(format!("{name}.fc2.weight"), Tensor::zeros(&[c, hidden]), true)?,
            b2: self.store.add(format!("{name}.fc2.bias"), Tensor::zeros(&[c]), true)?,
        })
    }
}

/// Builds the model with weights drawn from `seed`.
pub fn build_model<T: Scalar>(cfg: &HrpeConfig, seed: u64) -> Result<Hrpe<T>> {
    let mut m = Hrpe::<T>::new(cfg)?;
    m.init_weights(seed);
    Ok(m)
}

impl<T: Scalar> Hrpe<T> {
    /// Structure only: conv weights are zero until [`Hrpe::init_weights`].
    pub fn new(cfg: &HrpeConfig) -> Result<Self> {
        let mut bld = Builder { store: ParamStore::new() };
        let mut blocks = Vec::new();
        for spec in block_specs(cfg)? {
            let n = spec.name.as_str();
            blocks.push(match spec.kind {
                BlockKind::ConvBnRelu { ic, oc, k, stride } => Block::Conv(bld.conv_bn(n, ic, oc, k, stride, true)?),
                BlockKind::Bottleneck { ic, mid, oc } => Block::Bottleneck {
                    a: bld.conv_bn(&format!("{n}.a"), ic, mid, 1, 1, true)?,
                    b: bld.conv_bn(&format!("{n}.b"), mid, mid, 3, 1, true)?,
                    c: bld.conv_bn(&format!("{n}.c"), mid, oc, 1, 1, false)?,
                    proj: bld.conv_bn(&format!("{n}.proj"), ic, oc, 1, 1, false)?,
                },
                BlockKind::Reorg { channels, extra_dw, se_hidden } => {
                    let half = channels / 2;
                    let mut dws = vec![bld.dw(&format!("{n}.dw0"), half)?];
                    if extra_dw {
                        dws.push(bld.dw(&format!("{n}.dw1"), half)?);
                    }
                    let se = match se_hidden {
                        Some(h) => Some(bld.se(&format!("{n}.se"), half, h)?),
                        None => None,
                    };
                    Block::Reorg { channels, dws, se }
                }
                BlockKind::Head { ic } => Block::Head(bld.conv(n, ic, 1, 1, 1)?),
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            store: bld.store,
            blocks,
        })
    }

    pub fn config(&self) -> &HrpeConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// He-normal weights (`std = sqrt(2/fan_in)`) in parameter order; biases
    /// zero, BN γ = 1, β = 0, running statistics reset.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = SplitMix64::new(seed);
        for p in self.store.iter_mut() {
            let shape = p.value.shape().to_vec();
            let fill = if p.name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                p.value = Tensor::from_fn(&shape, |_| T::from_f64(std * rng.normal()));
                continue;
            } else if p.name.ends_with(".gamma") || p.name.ends_with(".running_var") {
                T::one()
            } else {
                T::zero()
            };
            p.value.fill(fill);
        }
        self.store.zero_grad();
    }

    /// Same structure and values in another precision.
    pub fn cast<U: Scalar>(&self) -> Hrpe<U> {
        Hrpe {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            blocks: self.blocks.clone(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.cfg.stride;
        if c != 1 {
            return shape_err(format!("model expects 1 input channel, got {c}"));
        }
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!("input {w}x{h} is not divisible by stride {s}")));
        }
        Ok(())
    }

    /// Runs the chain. Train mode normalizes with batch statistics and
    /// records a tape; eval mode uses running statistics.
    pub fn forward(&self, x: &Tensor<T>, mode: BnMode) -> Result<ForwardPass<T>> {
        let (output, tape, stats) = self.run(x, mode, true)?;
        Ok(ForwardPass {
            output,
            tape: Tape(tape),
            bn_updates: BnUpdates(stats),
        })
    }

    /// Eval-mode forward without recording activations. `N×1×H×W → N×1×H/s×W/s`.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x, BnMode::Eval, false)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn run(&self, x: &Tensor<T>, mode: BnMode, record: bool) -> Result<(Tensor<T>, Vec<BlockTape<T>>, Vec<(Bn, BatchStats<T>)>)> {
        self.check_input(x)?;
        let mut ctx = Ctx {
            store: &self.store,
            mode,
            stats: Vec::new(),
        };
        let mut tapes = Vec::new();
        let mut h = x.clone();
        for block in &self.blocks {
            let (out, tape) = match block {
                Block::Conv(l) => {
                    let (y, t) = ctx.conv_bn(l, h)?;
                    (y, BlockTape::Conv(t))
                }
                Block::Bottleneck { a, b, c, proj } => {
                    let (ya, ta) = ctx.conv_bn(a, h.clone())?;
                    let (yb, tb) = ctx.conv_bn(b, ya)?;
                    let (mut yc, tc) = ctx.conv_bn(c, yb)?;
                    let (yp, tp) = ctx.conv_bn(proj, h)?;
                    yc.add_assign(&yp)?;
                    let out = relu(&yc);
                    let keep = record.then(|| out.clone());
                    (out, BlockTape::Bottleneck { a: ta, b: tb, c: tc, proj: tp, out: keep })
                }
                Block::Reorg { channels, dws, se } => ctx.reorg(*channels, dws, se.as_ref(), h)?,
                Block::Head(conv) => {
                    let y = conv2d(&h, self.store.value(conv.w), Some(self.store.value(conv.b).data()), 1, 0)?;
                    (y, BlockTape::Head { input: h })
                }
            };
            if record {
                tapes.push(tape);
            }
            h = out;
        }
        Ok((h, tapes, ctx.stats))
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn commit_bn_updates(&mut self, updates: BnUpdates<T>) {
        let momentum = T::from_f64(BN_MOMENTUM);
        for (bn, batch) in updates.0 {
            let mut running = running_stats(&self.store, &bn);
            running.update(&batch, momentum);
            self.store.value_mut(bn.mean).data_mut().copy_from_slice(&running.mean);
            self.store.value_mut(bn.var).data_mut().copy_from_slice(&running.var);
        }
    }

    /// Back-propagates `grad_out` (shape of the forward output), accumulating
    /// parameter gradients into the store. Returns the input gradient.
    pub fn backward(&mut self, tape: Tape<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        if tape.0.len() != self.blocks.len() {
            return shape_err("backward: tape does not match the model");
        }
        let store = &mut self.store;
        let mut g = grad_out.clone();
        for (block, t) in self.blocks.iter().zip(tape.0).rev() {
            g = match (block, t) {
                (Block::Conv(l), BlockTape::Conv(t)) => conv_bn_backward(store, l, t, g)?,
                (Block::Bottleneck { a, b, c, proj }, BlockTape::Bottleneck { a: ta, b: tb, c: tc, proj: tp, out }) => {
                    let Some(out) = out else {
                        return shape_err("backward: tape recorded without activations");
                    };
                    let g = relu_backward(&out, &g)?;
                    let gp = conv_bn_backward(store, proj, tp, g.clone())?;
                    let gc = conv_bn_backward(store, c, tc, g)?;
                    let gb = conv_bn_backward(store, b, tb, gc)?;
                    let mut ga = conv_bn_backward(store, a, ta, gb)?;
                    ga.add_assign(&gp)?;
                    ga
                }
                (Block::Reorg { channels, dws, se }, BlockTape::Reorg { dws: tdws, se: tse }) => {
                    reorg_backward(store, *channels, dws, se.as_ref(), tdws, tse, g)?
                }
                (Block::Head(conv), BlockTape::Head { input }) => {
                    let grads = conv2d_backward(&input, store.value(conv.w), &g, 1, 0)?;
                    store.accumulate(conv.w, grads.weight.data())?;
                    store.accumulate(conv.b, &grads.bias)?;
                    grads.input
                }
                _ => return shape_err("backward: tape does not match the model"),
            };
        }
        Ok(g)
    }
}

impl Hrpe<f32> {
    /// Eval-mode response map for a single `1×1×H×W` (or `1×H×W`) image.
    pub fn predict(&self, image: &TensorF) -> Result<ResponseMap> {
        let x = match *image.shape() {
            [1, h, w] | [1, 1, h, w] => image.clone().reshape(&[1, 1, h, w])?,
            _ => return shape_err(format!("predict expects one image, got {:?}", image.shape())),
        };
        ResponseMap::from_tensor(self.infer(&x)?, self.cfg.stride)
    }
}

fn running_stats<T: Scalar>(store: &ParamStore<T>, bn: &Bn) -> RunningStats<T> {
    RunningStats {
        mean: store.value(bn.mean).data().to_vec(),
        var: store.value(bn.var).data().to_vec(),
    }
}

struct Ctx<'a, T> {
    store: &'a ParamStore<T>,
    mode: BnMode,
    stats: Vec<(Bn, BatchStats<T>)>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn bn(&mut self, bn: &Bn, x: &Tensor<T>) -> Result<(Tensor<T>, BnCache<T>)> {
        let s = self.store;
        let fwd = batchnorm2d_forward(
            x,
            s.value(bn.gamma).data(),
            s.value(bn.beta).data(),
            &running_stats(s, bn),
            self.mode,
            T::from_f64(BN_EPS),
        )?;
        if let Some(batch) = fwd.batch {
            self.stats.push((*bn, batch));
        }
        Ok((fwd.output, fwd.cache))
    }

    fn conv_bn(&mut self, l: &ConvBn, x: Tensor<T>) -> Result<(Tensor<T>, ConvBnTape<T>)> {
        let s = self.store;
        let y = conv2d(&x, s.value(l.conv.w), Some(s.value(l.conv.b).data()), l.conv.stride, l.conv.pad)?;
        let (y, cache) = self.bn(&l.bn, &y)?;
        let (y, out) = if l.relu {
            let r = relu(&y);
            (r.clone(), Some(r))
        } else {
            (y, None)
        };
        Ok((y, ConvBnTape { input: x, bn: cache, out }))
    }

    fn reorg(&mut self, channels: usize, dws: &[Dw], se: Option<&Se>, x: Tensor<T>) -> Result<(Tensor<T>, BlockTape<T>)> {
        let s = self.store;
        let (a, mut b) = channel_split(&x, channels / 2)?;
        let mut dw_tapes = Vec::with_capacity(dws.len());
        for dw in dws {
            let y = depthwise_conv2d(&b, s.value(dw.w), 1, 1)?;
            let (y, cache) = self.bn(&dw.bn, &y)?;
            dw_tapes.push((b, cache));
            b = y;
        }
        let se_tape = match se {
            Some(se) => {
                let pooled = global_avg_pool(&b)?;
                let hidden = relu(&linear(&pooled, s.value(se.w1), s.value(se.b1).data())?);
                let scale = sigmoid(&linear(&hidden, s.value(se.w2), s.value(se.b2).data())?);
                let y = scale_channels(&b, &scale)?;
                let t = SeTape { x: b, pooled, hidden, scale };
                b = y;
                Some(t)
            }
            None => None,
        };
        let out = channel_shuffle(&channel_concat(&a, &b)?, 2)?;
        Ok((out, BlockTape::Reorg { dws: dw_tapes, se: se_tape }))
    }
}

fn bn_backward<T: Scalar>(store: &mut ParamStore<T>, bn: &Bn, cache: &BnCache<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let grads = batchnorm2d_backward(cache, store.value(bn.gamma).data(), g)?;
    store.accumulate(bn.gamma, &grads.gamma)?;
    store.accumulate(bn.beta, &grads.beta)?;
    Ok(grads.input)
}

fn conv_bn_backward<T: Scalar>(store: &mut ParamStore<T>, l: &ConvBn, t: ConvBnTape<T>, g: Tensor<T>) -> Result<Tensor<T>> {
    let g = match &t.out {
        Some(out) => relu_backward(out, &g)?,
        None => g,
    };
    let g = bn_backward(store, &l.bn, &t.bn, &g)?;
    let grads = conv2d_backward(&t.input, store.value(l.conv.w), &g, l.conv.stride, l.conv.pad)?;
    store.accumulate(l.conv.w, grads.weight.data())?;
    store.accumulate(l.conv.b, &grads.bias)?;
    Ok(grads.input)
}

fn reorg_backward<T: Scalar>(
    store: &mut ParamStore<T>,
    channels: usize,
    dws: &[Dw],
    se: Option<&Se>,
    dw_tapes: Vec<(Tensor<T>, BnCache<T>)>,
    se_tape: Option<SeTape<T>>,
    g: Tensor<T>,
) -> Result<Tensor<T>> {
    let g = channel_shuffle_backward(&g, 2)?;
    let (ga, mut gb) = channel_split(&g, channels / 2)?;
    if let (Some(se), Some(t)) = (se, se_tape) {
        let (mut gx, gs) = scale_channels_backward(&t.x, &t.scale, &gb)?;
        let ge = sigmoid_backward(&t.scale, &gs)?;
        let (gh, gw2, gb2) = linear_backward(&t.hidden, store.value(se.w2), &ge)?;
        store.accumulate(se.w2, gw2.data())?;
        store.accumulate(se.b2, &gb2)?;
        let gz = relu_backward(&t.hidden, &gh)?;
        let (gp, gw1, gb1) = linear_backward(&t.pooled, store.value(se.w1), &gz)?;
        store.accumulate(se.w1, gw1.data())?;
        store.accumulate(se.b1, &gb1)?;
        gx.add_assign(&global_avg_pool_backward(t.x.shape(), &gp)?)?;
        gb = gx;
    }
    for (dw, (input, cache)) in dws.iter().zip(dw_tapes).rev() {
        let g = bn_backward(store, &dw.bn, &cache, &gb)?;
        let (gi, gw) = depthwise_conv2d_backward(&input, store.value(dw.w), &g, 1, 1)?;
        store.accumulate(dw.w, gw.data())?;
        gb = gi;
    }
    channel_concat(&ga, &gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> HrpeConfig {
        HrpeConfig { num_reorg_units: 3, ..HrpeConfig::default() }
    }

    #[test]
    fn output_shapes() {
        for (s, n) in [(2, 16), (4, 8), (8, 4)] {
            let m = build_model::<f32>(&HrpeConfig { stride: s, ..small_cfg() }, 1).unwrap();
            let out = m.infer(&TensorF::full(&[2, 1, 32, 32], 0.5)).unwrap();
            assert_eq!(out.shape(), &[2, 1, n, n]);
        }
        let m = build_model::<f32>(&small_cfg(), 1).unwrap();
        let out = m.infer(&TensorF::zeros(&[1, 1, 24, 40])).unwrap();
        assert_eq!(out.shape(), &[1, 1, 6, 10]);
        assert!(m.infer(&TensorF::zeros(&[1, 1, 30, 32])).is_err());
        assert!(m.infer(&TensorF::zeros(&[1, 2, 32, 32])).is_err());
    }

    #[test]
    fn first_conv_and_head_sizes() {
        let m = build_model::<f32>(&HrpeConfig::default(), 1).unwrap();
        let p = m.params();
        let n = |name: &str| p.value(p.id(name).unwrap()).len();
        assert_eq!(n("stem.0.conv.weight") + n("stem.0.conv.bias"), 640);
        assert_eq!(n("head.weight") + n("head.bias"), 33);
    }

    #[test]
    fn trainable_count_matches_cost_model() {
        for cfg in [
            HrpeConfig::default(),
            HrpeConfig { stride: 8, ..HrpeConfig::default() },
            HrpeConfig { enable_channel_reorg: false, ..HrpeConfig::default() },
            HrpeConfig { enable_reweighting: false, ..HrpeConfig::default() },
        ] {
            let m = Hrpe::<f32>::new(&cfg).unwrap();
            let trainable: usize = m.params().iter().filter(|p| p.trainable).map(|p| p.value.len()).sum();
            let cost = super::super::count_params_flops(&cfg, 64, 64).unwrap();
            assert_eq!(trainable as u64, cost.params);
        }
    }

    #[test]
    fn zero_head_gives_zero_map() {
        let mut m = build_model::<f32>(&small_cfg(), 3).unwrap();
        let id = m.params().id("head.weight").unwrap();
        m.params_mut().value_mut(id).fill(0.0);
        let x = TensorF::from_fn(&[1, 1, 32, 32], |i| (i % 7) as f32 / 7.0);
        assert!(m.infer(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_is_bitwise_deterministic() {
        let m = build_model::<f32>(&small_cfg(), 9).unwrap();
        let x = TensorF::from_fn(&[1, 1, 32, 32], |i| ((i * 31) % 17) as f32 / 17.0);
        let a = m.infer(&x).unwrap();
        let b = m.infer(&x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        let c = m.forward(&x, BnMode::Eval).unwrap().output;
        assert_eq!(a, c);
    }

    #[test]
    fn init_is_seeded() {
        let a = build_model::<f32>(&small_cfg(), 5).unwrap();
        let b = build_model::<f32>(&small_cfg(), 5).unwrap();
        let c = build_model::<f32>(&small_cfg(), 6).unwrap();
        let vals = |m: &HrpeF| m.params().iter().flat_map(|p| p.value.data().to_vec()).collect::<Vec<_>>();
        assert_eq!(vals(&a), vals(&b));
        assert_ne!(vals(&a), vals(&c));
        for p in a.params().iter() {
            if p.name.ends_with(".gamma") || p.name.ends_with(".running_var") {
                assert!(p.value.data().iter().all(|&v| v == 1.0), "{}", p.name);
            }
            if p.name.ends_with(".bias") || p.name.ends_with(".beta") || p.name.ends_with(".running_mean") {
                assert!(p.value.data().iter().all(|&v| v == 0.0), "{}", p.name);
            }
        }
    }

    #[test]
    fn he_init_std() {
        let m = build_model::<f32>(&HrpeConfig::default(), 11).unwrap();
        let w = m.params().value(m.params().id("stem.1.conv.weight").unwrap());
        let n = w.len() as f64;
        let mean = w.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = w.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let want = (2.0f64 / 576.0).sqrt();
        assert!((var.sqrt() / want - 1.0).abs() < 0.1, "std {} vs {want}", var.sqrt());
    }

    #[test]
    fn train_forward_collects_bn_stats() {
        let mut m = build_model::<f32>(&small_cfg(), 2).unwrap();
        let x = TensorF::from_fn(&[2, 1, 16, 16], |i| (i % 5) as f32);
        let fp = m.forward(&x, BnMode::Train).unwrap();
        let id = m.params().id("stem.0.bn.running_mean").unwrap();
        assert!(m.params().value(id).data().iter().all(|&v| v == 0.0));
        m.commit_bn_updates(fp.bn_updates);
        assert!(m.params().value(id).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn backward_fills_every_trainable_grad() {
        let mut m = build_model::<f64>(&small_cfg(), 4).unwrap();
        let x = Tensor::<f64>::from_fn(&[2, 1, 16, 16], |i| ((i * 13) % 11) as f64 / 11.0);
        let fp = m.forward(&x, BnMode::Train).unwrap();
        let g = Tensor::from_fn(fp.output.shape(), |i| ((i % 3) as f64) - 1.0);
        let gx = m.backward(fp.tape, &g).unwrap();
        assert_eq!(gx.shape(), x.shape());
        for p in m.params().iter().filter(|p| p.trainable) {
            // Conv biases directly before batch norm cancel out exactly.
            let before_bn = p.name.ends_with("conv.bias");
            let nz = p.grad.data().iter().any(|&v| v.abs() > 1e-12);
            assert!(nz || before_bn, "no gradient reached {}", p.name);
        }
    }

    #[test]
    fn translation_covariance() {
        let m = build_model::<f32>(&small_cfg(), 8).unwrap();
        let (h, w, s) = (128usize, 128usize, 4usize);
        let blob = |cx: f32, cy: f32| {
            TensorF::from_fn(&[1, 1, h, w], |i| {
                let (x, y) = ((i % w) as f32, (i / w) as f32);
                (-((x - cx).powi(2) + (y - cy).powi(2)) / 4.0).exp()
            })
        };
        let a = m.infer(&blob(60.0, 60.0)).unwrap();
        let b = m.infer(&blob(64.0, 60.0)).unwrap();
        let lw = w / s;
        let mut checked = 0;
        for v in 6..26 {
            for u in 6..25 {
                let (p, q) = (a.data()[v * lw + u], b.data()[v * lw + u + 1]);
                assert!((p - q).abs() < 1e-5, "({u},{v}): {p} vs {q}");
                checked += 1;
            }
        }
        assert!(checked > 300);
    }
}
