use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("image dimensions must be at least 1x1")]
    EmptyImage,
    #[error("pixel buffer length {len} does not match {width}x{height}")]
    PixelCount {
        width: usize,
        height: usize,
        len: usize,
    },
    #[error("non-finite intensity at pixel index {index}")]
    NonFiniteIntensity { index: usize },
    #[error(
        "patch {size}x{size} centred at ({cx},{cy}) overflows the {edge} edge of a {width}x{height} image"
    )]
    PatchOutOfBounds {
        cx: usize,
        cy: usize,
        size: usize,
        width: usize,
        height: usize,
        edge: &'static str,
    },
    #[error("focal power {0} outside [0,1]")]
    FocalPowerRange(f64),
    #[error("defocus blur scale sigma0 must be positive and finite, got {0}")]
    InvalidSigma0(f64),
    #[error("optimal focal power {0} outside [0,1]")]
    InvalidFStar(f64),

    #[error("pgm: {0}")]
    Pgm(String),

    #[error("frame index {t} out of range for scan with {len} frames")]
    FrameIndex { t: usize, len: usize },
    #[error("focal stack is empty")]
    EmptyStack,
    #[error("focal stack has {images} images but the grid lists {grid} focal powers")]
    StackGridMismatch { images: usize, grid: usize },
    #[error("focal grid must be strictly ascending within [0,1]")]
    BadFocalGrid,
    #[error("scan source {width}x{height} too small for a {crop}x{crop} crop")]
    SourceTooSmall {
        width: usize,
        height: usize,
        crop: usize,
    },
    #[error("scan manifest not found at {0}")]
    MissingManifest(PathBuf),
    #[error("invalid scan manifest: {0}")]
    BadManifest(String),
    #[error("unsupported scan format_version {0}")]
    UnsupportedFormatVersion(u32),
    #[error("scan frame {index} missing: {path}")]
    MissingScanFrame { index: usize, path: PathBuf },
    #[error("scan pixel checksum mismatch: manifest {expected:08x}, computed {actual:08x}")]
    ScanChecksum { expected: u32, actual: u32 },
    #[error("scan frame {index} is {got_w}x{got_h}, manifest says {want_w}x{want_h}")]
    FrameDimensions {
        index: usize,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },

    #[error("{context}: expected input width {expected}, got {got}")]
    WidthMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("checkpoint file truncated")]
    CheckpointTruncated,
    #[error("checkpoint magic bytes missing")]
    CheckpointMagic,
    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),
    #[error("corrupt checkpoint header: {0}")]
    CheckpointHeader(String),
    #[error("checkpoint payload checksum mismatch (header {expected:08x}, computed {actual:08x})")]
    CheckpointChecksum { expected: u32, actual: u32 },
    #[error("checkpoint does not fit the requested architecture: {0}")]
    ArchitectureMismatch(String),

    #[error("non-finite loss at experience {experiences}, episode {episode}: {details}")]
    NonFiniteLoss {
        experiences: u64,
        episode: usize,
        details: String,
    },

    #[error("incompatible policy/scan pairing: {0}")]
    Incompatible(String),
    #[error("evaluation reports cover different (scan, frame) index sets")]
    ReportMismatch,

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
