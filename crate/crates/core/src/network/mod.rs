//! The dual-decoder detector.
//!
//! A Siamese encoder turns both frames into feature pyramids. Two decoders,
//! one for occlusions and one for motion boundaries, visit the scales in a
//! configurable order; each level sees the cost blocks, the previous level's
//! predictions of both frames moved between frames, and (for the boundary
//! branch) an attention map computed from the gradient of the occlusion map.
//! Per-scale predictions are upsampled and fused by a 1x1 layer.
//!
//! Everything is differentiated by the small tape in [`graph`].

pub mod config;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod params;
pub mod train;

pub use config::{DecoderOrder, NetConfig, RunConfig, TrainConfig};
pub use gradcheck::{grad_check, GradCheckReport};
pub use model::{
    encoder_forward, focal_loss, forward, forward_probed, fusion_forward, loss, loss_and_grads, DirectionMaps,
    NetInput, Prediction, Probes, Targets, Trace,
};
pub use params::{Branch, Grads, LayerClass, ParamKey, Params};
pub use train::{train, train_from, train_with, Adam, TrainError, TrainOutcome};
