//! Flow-level simulation of bounded-degradation transport.
//!
//! Flexible flows declare how much of their max-min fair share they are
//! willing to give up (`alpha`) and how much of their payload may be dropped
//! (`r`). A per-flow budget and a synchronized probing controller decide when
//! such a flow can drop to the low-priority class of a two-queue weighted
//! scheduler, so regular flows finish sooner without breaking those bounds.
//!
//! The crate contains the shared domain types, a priority-aware max-min
//! allocator, the budget/probing controller, a fixed-tick fluid engine,
//! workload generators, metrics, scenario files and the experiment harness
//! used by the `reflex-sim` binary.

pub mod allocator;
pub mod engine;
pub mod harness;
pub mod metrics;
pub mod reflex;
pub mod scenario;
pub mod types;
pub mod workload;

pub use types::*;
