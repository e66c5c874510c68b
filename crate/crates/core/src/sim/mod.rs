//! Seeded discrete-event simulation of a gateway federation.

pub mod allocate;
pub mod bundle;
pub mod checker;
pub mod engine;
pub mod links;
pub mod metrics;
pub mod topology;
pub mod traffic;

pub use engine::{run, RunOptions, RunOutput, SimError};
