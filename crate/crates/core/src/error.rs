use thiserror::Error;

/// Errors raised by the grid, warping, cost, synthesis and evaluation layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("grid dimensions must be at least 1x1, got {width}x{height}")]
    EmptyGrid { width: usize, height: usize },
    #[error("expected {expected} values for the grid, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("value {value} at index {index} is outside the declared range {range}")]
    OutOfRange {
        index: usize,
        value: f64,
        range: &'static str,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("target size {target_w}x{target_h} is smaller than source {src_w}x{src_h}")]
    TargetTooSmall {
        src_w: usize,
        src_h: usize,
        target_w: usize,
        target_h: usize,
    },
    #[error("operation needs at least 2 pixels along each axis, got {width}x{height}")]
    Degenerate { width: usize, height: usize },
    #[error("flow directions must be opposite, got {0} and {1}")]
    DirectionMismatch(&'static str, &'static str),
    #[error("channel mismatch: {0} vs {1}")]
    ChannelMismatch(usize, usize),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
