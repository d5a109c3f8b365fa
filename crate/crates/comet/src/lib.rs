//! Core library for the comet small-object tracker: exact box geometry,
//! a minimal reverse-mode autodiff engine with precise RoI pooling, the
//! two-stream IoU/CLE network, offline training, online box refinement,
//! and an OPE-style evaluation bench.

pub mod boxgeom;
pub mod cometnet;
pub mod diffcore;
pub mod evalbench;
pub mod onlinetracker;
pub mod training;
pub mod verify;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({context}): w={w}, h={h} must be positive")]
    InvalidBox { context: String, w: f64, h: f64 },
    #[error("shape error in {op}: {details}")]
    Shape { op: String, details: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("sequence error: {0}")]
    Sequence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &str, details: impl Into<String>) -> Self {
        Error::Shape { op: op.to_string(), details: details.into() }
    }
    pub fn invalid_box(context: &str, w: f64, h: f64) -> Self {
        Error::InvalidBox { context: context.to_string(), w, h }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
