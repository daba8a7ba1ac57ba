//! Desk-scale toolkit for leaky integrate-and-fire networks: simulation,
//! surrogate-gradient training, flip-probability analysis, equivalent
//! sub-network construction with explicit width bounds, edge-popup search
//! over frozen weights, and rewind iterative pruning.
//!
//! Everything is deterministic: every source of randomness is an explicit
//! 64-bit seed, and repeated runs agree bit for bit.

pub mod encode;
pub mod error;
pub mod imp;
pub mod lif;
pub mod lth;
pub mod mat;
pub mod popup;
pub mod prob;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
pub use lif::{
    LayerState, LifParams, MaskedDenseLayer, NormParams, SpikeTrain, SpikingLayer,
    SpikingNetwork, WeightInit,
};
pub use mat::{Mask, Mat};
