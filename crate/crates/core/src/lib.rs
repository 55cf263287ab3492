//! Straggler-coded tree gradient aggregation.
//!
//! The crate builds `(n, L)`-regular aggregation trees, places coded data on
//! every node so that each parent can ignore up to `s` slow children, and
//! executes, times and trains with that scheme next to four baselines:
//! master-worker gradient coding, the uncoded master-worker sum, ring
//! allreduce and a straggler-dropping SGD.

pub mod allocation;
pub mod cli;
pub mod codes;
pub mod engine;
pub mod error;
pub mod latency;
pub mod ml;
pub mod topology;
pub mod transport;

pub use error::{Error, Result};
