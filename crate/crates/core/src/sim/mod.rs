//! Deterministic discrete-event kernel and the sharded network simulation
//! built on it.

mod engine;
mod limiter;
mod network;
mod queue;
mod trace;

pub use engine::{EpochSummary, Genesis, SimFailure, SimOutput, Simulator, TxOutcome, TxStatus};
pub use limiter::RateLimiter;
pub use network::{deliver, Latency, NetworkModel};
pub use queue::{EventQueue, SimEvent};
pub use trace::{chain_digest, read_csv, replay, write_csv, ReplayReport, Trace, TraceRow};
