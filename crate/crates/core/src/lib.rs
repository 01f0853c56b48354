//! Discrete-event simulator for importance-driven expert scheduling in
//! mixture-of-experts decode.
//!
//! Modules follow the decode path of one layer: [`router`] picks experts per
//! token (with substitution among near-equivalent ones), [`cache`] keeps a
//! bounded per-layer set of GPU-resident experts, [`prefetch`] speculates on
//! the next layer, [`balancer`] splits misses between CPU and PCIe, and
//! [`pipeline`] strings them together on a three-resource timeline.

pub mod balancer;
pub mod cache;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod prefetch;
pub mod rng;
pub mod router;
pub mod trace;

pub use config::{ExpertId, ModelShape, SimConfig, Stage, StageSet};
pub use error::{Error, Result};
