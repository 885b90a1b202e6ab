//! Core building blocks for resolution-robustness benchmarking: crop
//! geometry, scale distortion, robustness metrics, FLOPs budgets, dataset
//! adapters and run manifests. Nothing here depends on a model backend.

pub mod dataset;
pub mod distortion;
pub mod flops;
pub mod geometry;
pub mod manifest;
pub mod metrics;
pub mod resample;
pub mod sample;
