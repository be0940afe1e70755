//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {}", .0.join("; "))]
    InvalidModel(Vec<String>),

    #[error("sample matrix needs at least 2 rows, got {0}")]
    TooFewSamples(usize),

    #[error("column {0} has zero variance")]
    ZeroVariance(usize),

    #[error("triplet indices must be distinct")]
    NonDistinctIndices,

    #[error("distances not tree-realizable: triplet ({i},{j},{k}) off by {violation:.6} nats")]
    NotTreeRealizable {
        i: usize,
        j: usize,
        k: usize,
        violation: f64,
    },

    #[error("image {width}x{height} too small (need {min} pixels per side)")]
    ImageTooSmall {
        width: usize,
        height: usize,
        min: usize,
    },

    #[error("zero-size patch requested")]
    EmptyPatch,

    #[error("filter {fw}x{fh} larger than feature map {mw}x{mh}")]
    FilterTooLarge {
        fw: usize,
        fh: usize,
        mw: usize,
        mh: usize,
    },

    #[error("deformation weights not concave: w_dx2={0}, w_dy2={1}")]
    ConcavityViolation(f64, f64),

    #[error("model stream: bad magic")]
    BadMagic,

    #[error("model stream: version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("model stream: truncated")]
    Truncated,

    #[error("model stream: checksum mismatch")]
    ChecksumMismatch,

    #[error("unsupported image format: {0} (plug a decoder into load_image_with to handle it)")]
    UnsupportedFormat(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("k-means: k={k} exceeds {distinct} distinct points")]
    TooFewPoints { k: usize, distinct: usize },

    #[error("pose is missing part {0}")]
    MissingPart(usize),

    #[error("ground-truth segment has zero length")]
    ZeroLengthSegment,

    #[error("feature pyramid is empty")]
    EmptyPyramid,

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
