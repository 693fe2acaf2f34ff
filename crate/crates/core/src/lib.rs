//! Worst-case-throughput user grouping for Wi-Fi HaLow restricted access
//! windows (RAW).
//!
//! The crate simulates a HaLow uplink with CSMA/CA contention and
//! hidden-terminal interference, learns a weighted graph over users with an
//! actor-critic scheme, groups users by recursive SDP max-cut, and fine-tunes
//! the edge weights online. Everything is self-contained: no external
//! simulator and no ML framework.

pub mod actor_critic;
pub mod baselines;
pub mod maxcut;
pub mod net;
pub mod nn;
pub mod online;
pub mod sim;
pub mod train;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("user {user} unservable: path loss {loss_db:.2} dB exceeds the MCS ladder")]
    Unservable { user: usize, loss_db: f64 },
    #[error("solver did not converge: {0}")]
    NonConvergence(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
