//! Safe exploration of unknown planar environments by incrementally composing locally
//! learned control barrier functions.
//!
//! A LiDAR-style scan is turned into safe state-action pairs by a grid Hamilton-Jacobi
//! oracle, a compactly-supported RBF barrier is fit to those pairs with a small convex QP,
//! and the local barriers are combined by pointwise maximum into a non-smooth composite that
//! filters every control the agent applies.

pub mod artifacts;
pub mod basis;
pub mod commands;
pub mod composite;
pub mod config;
pub mod dynamics;
pub mod environment;
pub mod error;
pub mod exploration;
pub mod learning;
pub mod oracle;
pub mod par;
pub mod plot;
pub mod qp;

pub use error::{Error, Result};
