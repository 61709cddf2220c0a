//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape/dimension mismatches, non-finite values, malformed inputs.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A vector that should lie on the probability simplex does not.
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    /// Class index or element index out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// An operation requires a capability the API does not expose
    /// (e.g. debug logits on a probability-only service).
    #[error("capability not available: {0}")]
    Capability(String),

    /// Rejected configuration: bad field values or inconsistent sections.
    #[error("configuration error: {0}")]
    Config(String),

    /// Optimization diverged or a training precondition failed.
    #[error("training error: {0}")]
    Training(String),

    /// Graph misuse, e.g. backward on a non-scalar or empty graph.
    #[error("state error: {0}")]
    State(String),

    /// A label mapping cannot be constructed (more targets than sources).
    #[error("infeasible mapping: {0}")]
    Infeasible(String),

    /// The optional API-call cap was exceeded; carries the partial trace.
    #[error("api budget exceeded after {calls} calls")]
    Budget {
        calls: u64,
        trace: Box<crate::zoo::ZooTrace>,
    },

    /// A hard postcondition (meter exactness, bound check) failed.
    #[error("gate failure: {0}")]
    Gate(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
