//! Drift monitoring for a fleet of on-device classifiers: per-inference
//! detection, an attribute-tagged drift log, root cause analysis, a toy
//! classifier with parametric corruptions, entropy-based adaptation and a
//! by-cause model pool.

pub mod adapt;
pub mod detect;
pub mod driftlog;
pub mod itemset;
pub mod model;
pub mod pool;
pub mod rca;
pub mod weather;

pub use itemset::Itemset;
