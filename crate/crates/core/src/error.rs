use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Variants are grouped so the CLI can map them onto
/// its exit-code contract (1 = usage/config, 2 = data, 3 = numeric failure).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("image too small: {0}")]
    TooSmall(String),

    #[error("pyramid level would fall below 8 px: {0}")]
    PyramidTooDeep(String),

    #[error("kernel larger than image: kernel {kernel}x{kernel}, image {height}x{width}")]
    KernelTooLarge {
        kernel: usize,
        height: usize,
        width: usize,
    },

    #[error("empty parameter range: {0}")]
    InvalidRange(String),

    #[error("empty input list: {0}")]
    EmptyInput(String),

    #[error("sharp image is degenerate (no spectral content beyond DC); kernel is unidentifiable")]
    DegenerateSharpImage,

    #[error("pyramid level count mismatch: expected {expected}, got {got}")]
    LevelMismatch { expected: usize, got: usize },

    #[error("discriminator score outside (0,1): {0}")]
    ScoreDomain(f64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("too few scenes: need at least {need}, got {got}")]
    TooFewScenes { need: usize, got: usize },

    #[error("curriculum pool too small: pool {pool}, batch {batch}")]
    PoolTooSmall { pool: usize, batch: usize },

    #[error("crop {crop} exceeds image side {side}")]
    CropTooLarge { crop: usize, side: usize },

    #[error("model is not configured: {0}")]
    UnconfiguredModel(String),

    #[error("parameter archive mismatch: {0}")]
    ArchiveMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("iteration {t} out of range 0..={total}")]
    IterOutOfRange { t: usize, total: usize },

    #[error("target {0} already exists and is not empty (pass --overwrite to replace it)")]
    NonEmptyTarget(PathBuf),

    #[error("empty evaluation set at {0}")]
    EmptySet(PathBuf),

    #[error("infeasible ratio {ratio}: {reason}")]
    InfeasibleRatio { ratio: String, reason: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png error at {path}: {message}")]
    Png { path: PathBuf, message: String },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// CLI exit code bucket for this error.
    pub fn exit_code(&self) -> i32 {
        use Error::*;
        match self {
            Config(_) | InvalidRange(_) | UnconfiguredModel(_) | IterOutOfRange { .. } => 1,
            NonFinite(_) | ScoreDomain(_) | DegenerateSharpImage => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
