//! Analytic parameter and FLOP accounting. FLOPs count a multiply-add as two.

use serde::Serialize;

use super::config::HrpeConfig;
use super::graph::{block_specs, layer_walk, BlockKind};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    /// Trainable parameters (BN running statistics excluded).
    pub params: u64,
    /// Convolution and fully connected layers only.
    pub conv_flops: u64,
    /// Everything: convs plus BN, activations, pooling, scaling and residual adds.
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModelCost {
    pub params: u64,
    pub flops: u64,
    pub layers: Vec<LayerCost>,
}

impl ModelCost {
    pub fn params_m(&self) -> f64 {
        self.params as f64 / 1e6
    }

    pub fn flops_g(&self) -> f64 {
        self.flops as f64 / 1e9
    }
}

#[derive(Default)]
struct Acc {
    params: u64,
    conv: u64,
    other: u64,
}

impl Acc {
    /// Dense `k×k` conv with bias over `p` output pixels, groups = 1.
    fn conv(&mut self, ic: u64, oc: u64, k: u64, p: u64) {
        self.params += oc * ic * k * k + oc;
        self.conv += 2 * oc * ic * k * k * p;
    }

    /// Depthwise conv, no bias.
    fn depthwise(&mut self, c: u64, k: u64, p: u64) {
        self.params += c * k * k;
        self.conv += 2 * c * k * k * p;
    }

    /// Scale and shift per element, folded at inference.
    fn bn(&mut self, c: u64, p: u64) {
        self.params += 2 * c;
        self.other += 2 * c * p;
    }

    fn elementwise(&mut self, n: u64) {
        self.other += n;
    }

    fn fc(&mut self, inp: u64, out: u64) {
        self.params += inp * out + out;
        self.conv += 2 * inp * out;
    }
}

pub fn count_params_flops(cfg: &HrpeConfig, height: usize, width: usize) -> Result<ModelCost> {
    let specs = block_specs(cfg)?;
    let walk = layer_walk(cfg, height, width)?;
    let mut layers = Vec::with_capacity(specs.len());
    for (spec, shape) in specs.iter().zip(&walk) {
        let p = (shape.output[1] * shape.output[2]) as u64;
        let mut a = Acc::default();
        match spec.kind {
            BlockKind::ConvBnRelu { ic, oc, k, .. } => {
                a.conv(ic as u64, oc as u64, k as u64, p);
                a.bn(oc as u64, p);
                a.elementwise(oc as u64 * p);
            }
            BlockKind::Bottleneck { ic, mid, oc } => {
                let (ic, mid, oc) = (ic as u64, mid as u64, oc as u64);
                a.conv(ic, mid, 1, p);
                a.bn(mid, p);
                a.elementwise(mid * p);
                a.conv(mid, mid, 3, p);
                a.bn(mid, p);
                a.elementwise(mid * p);
                a.conv(mid, oc, 1, p);
                a.bn(oc, p);
                a.conv(ic, oc, 1, p);
                a.bn(oc, p);
                // residual add, then ReLU
                a.elementwise(2 * oc * p);
            }
            BlockKind::Reorg { channels, extra_dw, se_hidden } => {
                let cb = (channels / 2) as u64;
                for _ in 0..(1 + extra_dw as usize) {
                    a.depthwise(cb, 3, p);
                    a.bn(cb, p);
                }
                if let Some(h) = se_hidden {
                    let h = h as u64;
                    a.elementwise(cb * p); // global average pool
                    a.fc(cb, h);
                    a.elementwise(h); // ReLU
                    a.fc(h, cb);
                    a.elementwise(cb); // sigmoid
                    a.elementwise(cb * p); // channel scaling
                }
            }
            BlockKind::Head { ic } => a.conv(ic as u64, 1, 1, p),
        }
        layers.push(LayerCost {
            name: spec.name.clone(),
            params: a.params,
            conv_flops: a.conv,
            flops: a.conv + a.other,
        });
    }
    Ok(ModelCost {
        params: layers.iter().map(|l| l.params).sum(),
        flops: layers.iter().map(|l| l.flops).sum(),
        layers,
    })
}
