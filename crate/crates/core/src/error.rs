//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("party index {party} out of range for {count} parties")]
    PartyOutOfRange { party: usize, count: usize },

    #[error("expected {expected} amplitudes for this space, found {found}")]
    AmplitudeCount { expected: usize, found: usize },

    #[error("party space must have at least one party with nonzero dimension")]
    EmptySpace,

    #[error("operator shape {rows}x{cols} does not act on a dimension-{dim} party")]
    OperatorShape {
        rows: usize,
        cols: usize,
        dim: usize,
    },

    #[error("state norm {norm} is outside the ingestion tolerance around 1")]
    NotNormalized { norm: f64 },

    #[error("operator is not an isometry (residual {residual:.3e})")]
    NotIsometry { residual: f64 },

    #[error("basis is not orthonormal (residual {residual:.3e})")]
    NotOrthonormal { residual: f64 },

    #[error("states live on different party spaces: {0}")]
    SpaceMismatch(String),

    #[error("target overlap {0} is outside [0, 1]")]
    OverlapOutOfRange(f64),

    #[error("states are orthogonal within tolerance; no aligned form exists")]
    OrthogonalInput,

    #[error("states are not orthogonal (|<phi|psi>| = {0:.3e})")]
    NotOrthogonalInput(f64),

    #[error("states coincide up to phase; conclusive discrimination is impossible")]
    DegenerateStates,

    #[error("no angle solves the constraint: |C| = {c_abs:.6e} exceeds sqrt(A^2+B^2) = {r:.6e}")]
    ThetaInfeasible { c_abs: f64, r: f64 },

    #[error("{what} did not converge after {iterations} iterations")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
    },

    #[error(
        "term signs out of order: expected a positive term at {pos} and a negative term at {neg}"
    )]
    SignPrecondition { pos: usize, neg: usize },

    #[error("aligned overlap sum {0:.3e} is not positive; nothing to resolve")]
    NoPositiveOverlap(f64),

    #[error("protocol validation failed: {0}")]
    Validation(String),

    #[error("malformed protocol description: {0}")]
    MalformedProtocol(String),

    #[error("malformed state-pair description: {0}")]
    MalformedStatePair(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
