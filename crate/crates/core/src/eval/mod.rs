//! Evaluation: fidelity and diversity proxies, mask-image alignment, and a
//! downstream segmentation study.

pub mod downstream;
pub mod frechet;
pub mod metrics;
pub mod report;
