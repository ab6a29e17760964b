//! Joint motion-boundary and occlusion detection at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`grids`]: scalar maps, flow fields, feature maps and resampling.
//! - [`raster`]: the flat binary file format and image previews.
//! - [`warping`]: direct (splatting) and reverse (sampling) warps.
//! - [`cost`]: cost volumes and the two-dimensional cost block.
//! - [`synthdata`]: procedural scenes with exact ground truth.
//! - [`network`]: the dual-decoder detector, its loss, gradients and training.
//! - [`eval`]: occlusion F1, boundary average precision, stratified rates.
//! - [`ablation`]: the component/ordering/task sweep.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod cost;
pub mod error;
pub mod eval;
pub mod grids;
pub mod network;
pub mod par;
pub mod raster;
pub mod synthdata;
pub mod warping;

pub use error::{Error, Result};
pub use grids::{Direction, FeatureMap, FlowField, MaskedMap, RangeTag, ScalarMap};
