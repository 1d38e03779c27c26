//! Cloud-side drift monitor.
//!
//! Devices report one drift-log entry per inference and uplink a fraction of
//! their inputs. [`MonitorService`] enriches entries with weather, runs root
//! cause analysis when a window closes (or on operator request), raises
//! alerts, adapts one model per cause on the uplinked samples and publishes
//! the resulting pool. [`api::router`] exposes all of it over HTTP.

pub mod api;
pub mod config;
pub mod service;
pub mod weather;

pub use config::{OperatingMode, ServiceConfig};
pub use service::{
    parse_cause_id, AdaptationOutcome, Alert, AlertState, AnalysisOutcome, AuditEvent, CauseSummary, CloseOutcome,
    EntryAck, EventKind, EvictedVersion, MonitorService, PoolSnapshot, PoolView, RawEntry, RawSample, SampleAck,
    ServiceError, SkippedCause, TimelineMetric, TimelinePoint, WindowTicket, CLEAN_VERSION_ID,
};
pub use weather::{NoWeather, ScheduleWeather, WeatherProvider, UNKNOWN_WEATHER};
