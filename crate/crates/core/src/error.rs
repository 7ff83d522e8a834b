use thiserror::Error;

use crate::model::{AccountId, ShardId, TxId};

/// Errors surfaced by the protocol engine and the simulator.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    /// An operation was called outside of its input domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A scenario or protocol parameter is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A parameter of an analytic model is outside the formula's domain.
    #[error("model parameter `{param}` out of domain: {reason}")]
    ModelDomain { param: String, reason: String },

    /// A message or lock request reached a shard that does not own the account.
    #[error("account {account} is not owned by shard {shard}")]
    Routing { account: AccountId, shard: ShardId },

    #[error("transaction {0} rejected: insufficient balance")]
    InsufficientBalance(TxId),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("scheduling in the past: event at {at} but clock is {clock}")]
    SchedulePast { at: u64, clock: u64 },

    /// A commit-reveal round ended with no valid reveal.
    #[error("randomness round {round} produced no valid reveal")]
    BeaconFailure { round: u64 },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
