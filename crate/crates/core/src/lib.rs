//! Mixture of mesh experts.
//!
//! A transformer gate reads random walks over a triangle mesh and routes the
//! mesh to one of several expert predictors. Training balances a similarity
//! loss between experts against the gate-weighted diversity loss, with the
//! balance chosen each iteration by a Soft Actor-Critic agent.

pub mod diagnostics;
pub mod diff;
pub mod error;
pub mod experts;
pub mod gate;
pub mod mesh;
pub mod metrics;
pub mod moe;
pub mod rng;
pub mod sac;
pub mod synth;
pub mod walk;

pub use error::{Error, Result};
