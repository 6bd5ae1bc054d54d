//! Static description of the layer chain, independent of any weights.

use super::config::{HrpeConfig, WIDE_CHANNELS, WIDE_UNITS};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockKind {
    /// Regular conv (with bias) + BN + ReLU.
    ConvBnRelu { ic: usize, oc: usize, k: usize, stride: usize },
    /// 1×1 → 3×3 → 1×1 with a 1×1 projection shortcut.
    Bottleneck { ic: usize, mid: usize, oc: usize },
    /// Split, depthwise branch (+ optional extra depthwise, optional SE), concat, shuffle.
    Reorg { channels: usize, extra_dw: bool, se_hidden: Option<usize> },
    /// 1×1 conv to a single channel, no activation.
    Head { ic: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub name: String,
    pub kind: BlockKind,
}

impl BlockSpec {
    pub fn out_channels(&self) -> usize {
        match self.kind {
            BlockKind::ConvBnRelu { oc, .. } | BlockKind::Bottleneck { oc, .. } => oc,
            BlockKind::Reorg { channels, .. } => channels,
            BlockKind::Head { .. } => 1,
        }
    }

    pub fn stride(&self) -> usize {
        match self.kind {
            BlockKind::ConvBnRelu { stride, .. } => stride,
            _ => 1,
        }
    }
}

fn unit(cfg: &HrpeConfig, name: String, channels: usize, index: usize) -> BlockSpec {
    let kind = if cfg.enable_channel_reorg {
        BlockKind::Reorg {
            channels,
            extra_dw: cfg.has_extra_dw(index),
            se_hidden: cfg.enable_reweighting.then(|| (channels / 2 / cfg.se_reduction).max(1)),
        }
    } else {
        BlockKind::ConvBnRelu { ic: channels, oc: channels, k: 3, stride: 1 }
    };
    BlockSpec { name, kind }
}

/// The full chain of blocks for `cfg`, input to head.
pub fn block_specs(cfg: &HrpeConfig) -> Result<Vec<BlockSpec>> {
    cfg.validate()?;
    let c0 = cfg.stem_channels;
    let mut strides = vec![2, if cfg.stride == 2 { 1 } else { 2 }];
    strides.extend(std::iter::repeat(2).take(cfg.stem_downsamples().saturating_sub(2)));
    let mut out: Vec<BlockSpec> = strides
        .iter()
        .enumerate()
        .map(|(i, &stride)| BlockSpec {
            name: format!("stem.{i}"),
            kind: BlockKind::ConvBnRelu { ic: if i == 0 { 1 } else { c0 }, oc: c0, k: 3, stride },
        })
        .collect();
    out.push(BlockSpec {
        name: "bottleneck".into(),
        kind: BlockKind::Bottleneck { ic: c0, mid: c0, oc: WIDE_CHANNELS },
    });
    for i in 0..WIDE_UNITS {
        out.push(unit(cfg, format!("wide.{i}"), WIDE_CHANNELS, i));
    }
    out.push(BlockSpec {
        name: "transition".into(),
        kind: BlockKind::ConvBnRelu { ic: WIDE_CHANNELS, oc: cfg.trunk_channels, k: 1, stride: 1 },
    });
    for i in 0..cfg.num_reorg_units {
        out.push(unit(cfg, format!("trunk.{i}"), cfg.trunk_channels, i));
    }
    out.push(BlockSpec { name: "head".into(), kind: BlockKind::Head { ic: cfg.trunk_channels } });
    Ok(out)
}

/// One block in the chain with its `[C, H, W]` input and output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

/// Walks the chain on an `H×W` input, propagating shapes.
pub fn layer_walk(cfg: &HrpeConfig, height: usize, width: usize) -> Result<Vec<LayerShape>> {
    let mut cur = [1, height, width];
    block_specs(cfg)?
        .into_iter()
        .map(|b| {
            let s = b.stride();
            // 3×3 convs pad by 1, so stride-2 layers map n → ⌈n/2⌉.
            let next = [b.out_channels(), cur[1].div_ceil(s), cur[2].div_ceil(s)];
            let shape = LayerShape { name: b.name, input: cur, output: next };
            cur = next;
            Ok(shape)
        })
        .collect()
}
