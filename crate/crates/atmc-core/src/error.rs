use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum AtmcError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("convolution produces non-positive output size: input {h}x{w}, kernel {k}, stride {stride}, pad {pad}")]
    BadConvGeometry {
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },

    #[error("backward called twice without a new forward pass")]
    DoubleBackward,

    #[error("backward requires a scalar loss node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value encountered in {context} at step {step}")]
    NonFinite { context: &'static str, step: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: bad IDX magic at offset {offset}: expected {expected:#010x}, found {found:#010x}")]
    IdxBadMagic {
        path: String,
        offset: usize,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated at offset {offset}: needed {needed} more bytes")]
    IdxTruncated {
        path: String,
        offset: usize,
        needed: usize,
    },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("checkpoint: bad magic (not an ATMC checkpoint)")]
    CheckpointBadMagic,

    #[error("checkpoint: version mismatch: file has {found}, this build reads {supported}")]
    CheckpointVersion { found: u16, supported: u16 },

    #[error("checkpoint: checksum failure (file corrupt)")]
    CheckpointChecksum,

    #[error("checkpoint: truncated or malformed at byte {offset}")]
    CheckpointTruncated { offset: usize },

    #[error("checkpoint: stored dtype {found} does not match requested {requested}")]
    CheckpointDtype { found: String, requested: String },

    #[error("matrix has {distinct} distinct nonzero values, too many for {bits}-bit encoding")]
    InfeasibleQuantization { distinct: usize, bits: u8 },

    #[error("SVD failed on a {rows}x{cols} matrix")]
    SvdFailure { rows: usize, cols: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AtmcError>;
