use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channels of the bottleneck output and the reorganization units that follow it.
pub const WIDE_CHANNELS: usize = 256;
/// Reorganization units run at [`WIDE_CHANNELS`] before the transition.
pub const WIDE_UNITS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HrpeConfig {
    /// Output stride; one of 2, 4, 8.
    pub stride: usize,
    pub stem_channels: usize,
    pub trunk_channels: usize,
    pub num_reorg_units: usize,
    /// Units whose index is a multiple of this carry a second depthwise
    /// conv; 0 disables the extra conv.
    pub extra_dw_every: usize,
    pub enable_channel_reorg: bool,
    pub enable_reweighting: bool,
    pub se_reduction: usize,
}

impl Default for HrpeConfig {
    fn default() -> Self {
        Self {
            stride: 4,
            stem_channels: 64,
            trunk_channels: 32,
            num_reorg_units: 8,
            extra_dw_every: 2,
            enable_channel_reorg: true,
            enable_reweighting: true,
            se_reduction: 4,
        }
    }
}

impl HrpeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if ![2, 4, 8].contains(&self.stride) {
            return bad(format!("model stride {} must be 2, 4 or 8", self.stride));
        }
        if self.stem_channels == 0 {
            return bad("stem_channels must be >= 1".into());
        }
        if self.trunk_channels < 2 || self.trunk_channels % 2 != 0 {
            return bad(format!("trunk_channels {} must be even and >= 2", self.trunk_channels));
        }
        if self.se_reduction == 0 {
            return bad("se_reduction must be >= 1".into());
        }
        if self.enable_reweighting && self.trunk_channels / 2 < self.se_reduction {
            return bad(format!(
                "se_reduction {} leaves no hidden units for {} branch channels",
                self.se_reduction,
                self.trunk_channels / 2
            ));
        }
        Ok(())
    }

    /// Stable textual form; its hash guards weight files.
    pub fn canonical_string(&self) -> String {
        format!(
            "hrpe-v1;stride={};stem_channels={};trunk_channels={};num_reorg_units={};extra_dw_every={};\
             enable_channel_reorg={};enable_reweighting={};se_reduction={};wide_channels={};wide_units={}",
            self.stride,
            self.stem_channels,
            self.trunk_channels,
            self.num_reorg_units,
            self.extra_dw_every,
            self.enable_channel_reorg,
            self.enable_reweighting,
            self.se_reduction,
            WIDE_CHANNELS,
            WIDE_UNITS,
        )
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.canonical_string().as_bytes())
    }

    /// Number of stride-2 convolutions in the stem.
    pub fn stem_downsamples(&self) -> usize {
        self.stride.trailing_zeros() as usize
    }

    pub(crate) fn has_extra_dw(&self, unit: usize) -> bool {
        self.extra_dw_every != 0 && unit % self.extra_dw_every == 0
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
