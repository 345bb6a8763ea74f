use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed audio container: {0}")]
    Format(String),

    #[error("unsupported sample encoding: {0}")]
    UnsupportedCodec(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("input too short: {what} ({have} < {need})")]
    TooShort {
        what: &'static str,
        have: f64,
        need: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error in {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("weight error: {0}")]
    Weight(String),

    #[error("weight file corrupted: {0}")]
    Corruption(String),

    #[error("training diverged at step {step}: loss {loss} exceeded 10x initial {initial}")]
    Divergence { step: usize, loss: f64, initial: f64 },

    #[error("frozen parameter {0} changed during steering")]
    FrozenViolation(String),

    #[error("codec bank incomplete: track {track} has no {codec} variant")]
    IncompleteBank { track: String, codec: String },

    #[error("encoder `{command}` failed with status {status}: {stderr}")]
    Encoder {
        command: String,
        status: i32,
        stderr: String,
    },

    #[error("environment error: {0}")]
    Environment(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("no segment probabilities to aggregate")]
    NoSegments,

    #[error("AUC undefined: {0} class is empty")]
    UndefinedAuc(&'static str),

    #[error("effective bandwidth undefined for an all-zero residual")]
    UndefinedBandwidth,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
