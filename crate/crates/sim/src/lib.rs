//! Deterministic device-fleet simulator.
//!
//! Devices at several locations send Poisson-distributed inference requests
//! whose inputs are corrupted while their location's weather is one of the
//! configured causes. Each window is replayed under one adaptation strategy
//! (`no-adapt`, `adapt-all` or `by-cause`, the latter driving a full
//! [`driftwatch_service::MonitorService`]) and scored against ground truth
//! the monitor never sees.

pub mod config;
pub mod run;
pub mod stream;

use driftwatch_core::adapt::AdaptError;
use driftwatch_core::detect::DetectError;
use driftwatch_core::model::ModelError;
use driftwatch_core::weather::WeatherError;
use driftwatch_service::ServiceError;
use thiserror::Error;

pub use config::{default_locations, SimConfig, WeatherSource};
pub use run::{detection_evolution, report_hash, run, run_prepared, CauseDetection, Prepared, SimReport, Strategy, WindowSummary};
pub use stream::{generate_stream, Event, GroundTruth, SealedLabels, Stream};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Weather(#[from] WeatherError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Service(#[from] ServiceError),
}
