use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed task json: {0}")]
    MalformedJson(String),
    #[error("grid dimension {0} exceeds the 30-cell limit")]
    GridTooLarge(usize),
    #[error("color {0} outside the 0..=9 palette")]
    ColorOutOfRange(i64),
    #[error("ragged rows: row {row} has width {got}, expected {expected}")]
    RaggedRows { row: usize, got: usize, expected: usize },
    #[error("canvas size {canvas} too small for a {h}x{w} grid")]
    CanvasTooSmall { canvas: usize, h: usize, w: usize },
    #[error("invalid augmentation params: {0}")]
    InvalidParams(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("attention row {0} has no allowed targets")]
    EmptyRow(usize),
    #[error("class index {0} out of range for {1} classes")]
    ClassOutOfRange(usize, usize),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite state at recurrent step {0}")]
    NonFiniteState(usize),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("task index {0} out of range ({1} task embeddings)")]
    TaskIndexOutOfRange(usize, usize),
    #[error("loss config violation: {0}")]
    ConfigViolation(String),
    #[error("variant mismatch: {0}")]
    VariantMismatch(String),
    #[error("empty vote table")]
    EmptyVotes,
    #[error("missing ground truth for task {0}")]
    MissingGroundTruth(String),
    #[error("grid {h}x{w} too large for scale-2 placement on canvas {canvas}")]
    GridTooLargeForScale2 { h: usize, w: usize, canvas: usize },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
