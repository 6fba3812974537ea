//! Learning motion-planning constraints from driving demonstrations.
//!
//! A VAE trained on expert state-action images acts as a density proxy; a
//! classifier sharing the VAE backbone is retrained in a loop against the
//! choices of a sample-based Frenet planner until the planner stops
//! proposing out-of-distribution behavior.

pub mod constraint;
pub mod dataset;
pub mod density;
pub mod error;
pub mod evaluate;
pub mod inference;
pub mod kv;
pub mod neural;
pub mod ogm;
pub mod pairs;
pub mod planner;
pub mod scene;

pub use error::{Error, Result};
