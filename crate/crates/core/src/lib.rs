//! Discrete-event simulation and analysis of block dissemination on
//! bandwidth-limited peer-to-peer networks.

pub mod chaindag;
pub mod metrics;
pub mod netgraph;
pub mod rng;
pub mod saturation;
pub mod simengine;
pub mod stats;
pub mod traceio;
