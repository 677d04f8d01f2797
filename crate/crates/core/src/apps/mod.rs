//! Experiment pipelines: robust image modeling, joint feature/tag coding,
//! and l1-graph spectral clustering.

pub mod image;
pub mod tags;
pub mod cluster;
