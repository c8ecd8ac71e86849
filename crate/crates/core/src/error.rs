use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {layer}: expected {expected}, got {got}")]
    Shape {
        layer: String,
        expected: String,
        got: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{}: wrong magic number {found:#010x} (expected {expected:#010x})", .path.display())]
    WrongMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{}: truncated file ({got} bytes, header promises {expected})", .path.display())]
    Truncated {
        path: PathBuf,
        got: usize,
        expected: usize,
    },

    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("{}: invalid label {label} at index {index}", .path.display())]
    BadLabel {
        path: PathBuf,
        index: usize,
        label: u8,
    },

    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Divergence { epoch: usize, step: usize },

    #[error("conversion failed at layer {layer}: {reason}")]
    Conversion { layer: String, reason: String },

    #[error("value {value} outside [{lo}, {hi}]")]
    Range { value: f64, lo: f64, hi: f64 },

    #[error("observer rejected non-finite value at site {site}")]
    Observation { site: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("acceptance gate failed: {0}")]
    Gate(String),

    #[error("io error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            layer: layer.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
