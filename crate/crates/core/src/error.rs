//! Crate-wide error type.

use thiserror::Error;

/// Unified error for the relative-navigation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes are inconsistent.
    #[error("dimension mismatch in {context}: {detail}")]
    Dimension { context: &'static str, detail: String },

    /// A scalar parameter is outside its valid range.
    #[error("invalid parameter {name}: {detail}")]
    Parameter { name: &'static str, detail: String },

    /// A rotation construction hit a degenerate input.
    #[error("degenerate rotation input: {0}")]
    DegenerateRotation(String),

    /// A point to be projected lies at or behind the camera plane.
    #[error("point behind camera: z = {z}")]
    BehindCamera { z: f64 },

    /// The render target is entirely behind the camera.
    #[error("render target fully behind camera (center z = {z})")]
    RenderBehindCamera { z: f64 },

    /// Dataset or weight persistence failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A stored frame no longer matches its recorded checksum.
    #[error("checksum mismatch for {path}")]
    Checksum { path: String },

    /// A persisted file has an unsupported format version.
    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    /// A persisted file failed structural validation.
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    /// Weight file fingerprint does not match the expected configuration.
    #[error("config fingerprint mismatch: file has {found}, expected {expected}")]
    Fingerprint { found: String, expected: String },

    /// Training diverged or was given unusable data.
    #[error("training error: {0}")]
    Training(String),

    /// A frame could not be matched to a mocap record within the gap bound.
    #[error("unmatched frame at t = {frame_t} s: nearest mocap record is {gap} s away (limit {limit} s)")]
    UnmatchedFrame { frame_t: f64, gap: f64, limit: f64 },

    /// An operation was asked to run on an empty input set.
    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn dim(context: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { context, detail: detail.into() }
    }

    pub(crate) fn param(name: &'static str, detail: impl Into<String>) -> Self {
        Error::Parameter { name, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
