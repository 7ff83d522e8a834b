//! Range-based sharding: partitioned key space, per-shard BFT consensus,
//! commit-reveal randomness, cross-shard transactions with Merkle
//! proof-of-lock, epoch reconfiguration, and a deterministic discrete-event
//! simulator that measures all of it.

pub mod config;
pub mod consensus;
pub mod cross_shard;
pub mod epoch;
pub mod error;
pub mod harness;
pub mod hash;
pub mod model;
pub mod partition;
pub mod prf;
pub mod randomness;
pub mod sim;

pub use error::{Error, Result};
pub use hash::Hash256;
pub use model::*;
pub use partition::{KeySpace, Range, RangeTable};
