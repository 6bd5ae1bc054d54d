//! High-resolution encoder: stem down to stride `s`, then a single chain of
//! channel-reorganization units at constant resolution, then a 1×1 head.

mod config;
mod cost;
mod graph;
mod io;
mod model;

pub use config::{fnv1a64, HrpeConfig, WIDE_CHANNELS, WIDE_UNITS};
pub use cost::{count_params_flops, LayerCost, ModelCost};
pub use graph::{block_specs, layer_walk, BlockKind, BlockSpec, LayerShape};
pub use io::{load_weights, read_weights_bytes, save_weights, weights_to_bytes};
pub use model::{build_model, BnUpdates, ForwardPass, Hrpe, HrpeF, Tape, BN_EPS, BN_MOMENTUM};
