//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("channel index {ch} out of range (grid has {channels} channels)")]
    ChannelOutOfRange { ch: usize, channels: usize },

    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },

    #[error("degenerate box ({m1}, {n1}, {m2}, {n2}): need m2 > m1, n2 > n1 and size >= 2 px")]
    DegenerateBox { m1: f64, n1: f64, m2: f64, n2: f64 },

    #[error("target grid must be at least 2x2, got {h}x{w}")]
    GridTooSmall { h: usize, w: usize },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    #[error("identity {id} out of range (expected < {n_id})")]
    InvalidIdentity { id: usize, n_id: usize },

    #[error("need at least 2 identities, got {n_id}")]
    TooFewIdentities { n_id: usize },

    #[error("proxy table has no filled negative slot for any anchor")]
    NoFilledNegative,

    #[error("batch must contain at least one anchor")]
    EmptyBatch,

    #[error("embedding collapsed to (near) zero norm; cannot normalize")]
    DegenerateEmbedding,

    #[error("network must be frozen for this operation")]
    NetNotFrozen,

    #[error("box perturbation failed to reach target IoU range after {attempts} attempts")]
    PerturbRejection { attempts: usize },

    #[error("canvas {rows}x{cols} too small for {requested} instances")]
    CanvasTooSmall {
        rows: usize,
        cols: usize,
        requested: usize,
    },

    #[error("query identity {id} has no ground-truth instance in the gallery")]
    QueryNotInGallery { id: usize },

    #[error("invalid {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
