//! Deterministic desk-scale simulator of Byzantine-robust federated learning.
//!
//! A single trusted server coordinates `N` clients over `T` communication
//! rounds. Clients train locally on non-IID shards produced by Dirichlet
//! partitioning; some of them may be adversarial (label flipping or Gaussian
//! noise injection). The server combines the returned models with one of six
//! aggregation rules, including FedGreed: sort client models by their loss on
//! a server-held trusted set and greedily extend the running prefix average
//! while that loss strictly improves.
//!
//! Everything is driven by explicit 64-bit seeds; repeated runs of the same
//! configuration produce bit-identical telemetry and artifacts, including
//! under parallel client execution.

pub mod aggregation;
pub mod attacks;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod model;
pub mod report;
pub mod rng;

pub use error::SimError;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, SimError>;
