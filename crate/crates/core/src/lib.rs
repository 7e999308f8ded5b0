//! Construction, exact verification, and sampling simulation of local
//! measurement protocols that conclusively distinguish two known
//! multipartite pure states.
//!
//! Conclusive discrimination never misidentifies: every measurement outcome
//! either names the prepared state correctly or declares the run
//! inconclusive. For a pair with overlap `<phi|psi>` the best achievable
//! average conclusive probability is `1 - |<phi|psi>|`, and the protocols
//! built here reach it using only one-party measurements and classical
//! message passing between parties.
//!
//! Module map:
//! - [`statespace`]: party spaces, pure states, one-party cuts, pair files.
//! - [`canonical`]: alignment of a pair along one party (equal weights,
//!   real component overlaps) via two-level rotations.
//! - [`protocols`]: measurement tree construction and validation.
//! - [`simulate`]: exact tree evaluation and seeded sampling.

pub mod canonical;
pub mod error;
pub mod linalg;
pub mod protocols;
pub mod simulate;
pub mod statespace;

pub use error::{Error, Result};
