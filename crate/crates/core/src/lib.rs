//! Deterministic closed-loop cooperative driving benchmark engine.

pub mod agents;
pub mod api;
pub mod bench;
pub mod bridge;
pub mod control;
pub mod crafted;
pub mod gen;
pub mod geometry;
pub mod maps;
pub mod metrics;
pub mod real2sim;
pub mod rng;
pub mod scenario;
pub mod sim;
pub mod textio;
pub mod v2x;
