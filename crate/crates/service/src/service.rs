//! The monitor: ingestion, per-window analysis, alerts, adaptation and pool
//! publication.
//!
//! Locks are short-lived and never nested except `pool_writer → pool`.
//! Analysis and adaptation of one window are serialized by a per-window busy
//! flag ([`WindowTicket`]); a second trigger while one runs is rejected
//! rather than queued.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use driftwatch_core::adapt::adapt;
use driftwatch_core::driftlog::{DriftLogEntry, DriftLogStore, LogError, LogWindow, Schema};
use driftwatch_core::itemset::Itemset;
use driftwatch_core::model::ToyClassifier;
use driftwatch_core::pool::{EvictionReason, ModelPool, ModelVersion, PoolEntry, SubsumptionMode};
use driftwatch_core::rca::{analyze_with, Metrics, RiskRatio, RootCauseReport};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{OperatingMode, ServiceConfig};
use crate::weather::{WeatherProvider, UNKNOWN_WEATHER};

pub const CLEAN_VERSION_ID: &str = "clean";
const BASE_ID: &str = "toy-head";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServiceError {
    /// Request content rejected; `field` names the offending part.
    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },
    #[error("not found: {0}")]
    NotFound(String),
    /// Valid request that the current state does not allow.
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("storage error: {0}")]
    Storage(String),
}

impl ServiceError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        ServiceError::Invalid { field: field.into(), message: message.into() }
    }
}

impl From<LogError> for ServiceError {
    fn from(e: LogError) -> Self {
        match e {
            LogError::Schema { field, reason } => ServiceError::Invalid { field, message: reason },
            LogError::InvalidInput(m) => ServiceError::invalid("entry", m),
            other => ServiceError::Storage(other.to_string()),
        }
    }
}

/// Drift-log entry as reported by a device, before enrichment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawEntry {
    pub timestamp: i64,
    pub device_id: String,
    pub model_version_id: String,
    pub location: String,
    pub drift: bool,
    /// Further schema attributes. A `weather` value here is kept as is;
    /// otherwise the weather provider fills it in.
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

/// Uplinked model input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSample {
    pub timestamp: i64,
    pub device_id: String,
    pub location: String,
    pub features: Vec<f64>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
struct BufferedSample {
    attributes: BTreeMap<String, String>,
    features: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryAck {
    pub id: u64,
    pub window_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleAck {
    pub window_id: u64,
    /// Samples buffered for that window after this one.
    pub buffered: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertState {
    Open,
    Acknowledged,
    Adapted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CauseSummary {
    /// `w{window}-c{index}`; the handle adaptation triggers refer to.
    pub cause_id: String,
    pub itemset: Itemset,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub id: u64,
    pub window_id: u64,
    pub causes: Vec<CauseSummary>,
    /// End of the analyzed window.
    pub created_at: i64,
    pub state: AlertState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCause {
    pub cause_id: String,
    pub itemset: Itemset,
    pub samples: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvictedVersion {
    pub version_id: String,
    pub cause: Itemset,
    pub reason: EvictionReason,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdaptationOutcome {
    pub created: Vec<ModelVersion>,
    pub skipped: Vec<SkippedCause>,
    pub evicted: Vec<EvictedVersion>,
    /// Pool generation after the round.
    pub pool_generation: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOutcome {
    pub report: Arc<RootCauseReport>,
    pub alert: Option<Alert>,
    /// Present when autopilot adapted right after the analysis.
    pub adaptation: Option<AdaptationOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloseOutcome {
    pub window_id: u64,
    pub already_closed: bool,
    pub analysis: Option<AnalysisOutcome>,
}

/// Pool state as published to devices.
#[derive(Debug, Clone)]
pub struct PoolSnapshot {
    pub generation: u64,
    pub pool: Arc<ModelPool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolView {
    pub generation: u64,
    pub capacity: usize,
    pub subsumption: SubsumptionMode,
    /// Most recently updated first, clean model last.
    pub versions: Vec<PoolEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimelineMetric {
    DriftRate,
    Entries,
    Drifted,
    /// Share of predictions the detector did not flag.
    AccuracyProxy,
}

impl FromStr for TimelineMetric {
    type Err = ServiceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "drift_rate" => Ok(Self::DriftRate),
            "entries" => Ok(Self::Entries),
            "drifted" => Ok(Self::Drifted),
            "accuracy_proxy" => Ok(Self::AccuracyProxy),
            other => Err(ServiceError::invalid("metric", format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelinePoint {
    pub window_id: u64,
    pub start: i64,
    pub end: i64,
    /// `None` for ratios over an empty window.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    ModeChanged { from: OperatingMode, to: OperatingMode },
    WindowClosed { window_id: u64 },
    AnalysisCompleted { window_id: u64, causes: Vec<Itemset>, alert_id: Option<u64> },
    AlertAcknowledged { alert_id: u64 },
    VersionCreated { version_id: String, cause: Itemset, window_id: u64, origin: String, samples: usize },
    VersionEvicted { version_id: String, cause: Itemset, reason: EvictionReason },
    AdaptationSkipped { cause_id: String, cause: Itemset, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Default, Clone, Copy)]
struct WindowState {
    closed: bool,
    busy: bool,
    analyzed: bool,
}

#[derive(Debug, Default, Clone, Copy)]
struct WindowCounts {
    entries: usize,
    drifted: usize,
}

#[derive(Debug, Default)]
struct EventLog {
    events: Vec<AuditEvent>,
    sink: Option<BufWriter<File>>,
}

/// Exclusive right to analyze or adapt one window; released on drop.
#[derive(Debug)]
pub struct WindowTicket<'a> {
    svc: &'a MonitorService,
    window_id: u64,
}

impl WindowTicket<'_> {
    pub fn window_id(&self) -> u64 {
        self.window_id
    }
}

impl Drop for WindowTicket<'_> {
    fn drop(&mut self) {
        if let Some(s) = self.svc.windows.lock().get_mut(&self.window_id) {
            s.busy = false;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    Autopilot,
    Operator,
}

pub struct MonitorService {
    config: ServiceConfig,
    base: Arc<ToyClassifier>,
    weather: Arc<dyn WeatherProvider>,
    log: RwLock<DriftLogStore>,
    counts: Mutex<BTreeMap<u64, WindowCounts>>,
    samples: Mutex<BTreeMap<u64, Vec<BufferedSample>>>,
    windows: Mutex<BTreeMap<u64, WindowState>>,
    reports: RwLock<BTreeMap<u64, Arc<RootCauseReport>>>,
    alerts: RwLock<Vec<Alert>>,
    mode: RwLock<OperatingMode>,
    pool: RwLock<PoolSnapshot>,
    pool_writer: Mutex<()>,
    events: Mutex<EventLog>,
    next_version: AtomicU64,
}

impl std::fmt::Debug for MonitorService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MonitorService").field("config", &self.config).finish_non_exhaustive()
    }
}

impl MonitorService {
    /// Builds a service around a trained clean classifier. With a data
    /// directory, the drift log, reports and audit events persist there and
    /// previously persisted reports are reloaded (their windows stay
    /// analyzed).
    pub fn new(
        config: ServiceConfig,
        base: ToyClassifier,
        weather: Arc<dyn WeatherProvider>,
    ) -> Result<Self, ServiceError> {
        config.validate()?;
        let schema = Schema::new(config.schema.iter().cloned());
        let mut reports = BTreeMap::new();
        let mut windows = BTreeMap::new();
        let mut counts = BTreeMap::new();
        let (log, events) = match &config.data_dir {
            None => (DriftLogStore::in_memory(schema), EventLog::default()),
            Some(dir) => {
                fs::create_dir_all(dir.join("reports")).map_err(storage)?;
                let log = DriftLogStore::open(dir.join("driftlog.jsonl"), schema)?;
                for entry in fs::read_dir(dir.join("reports")).map_err(storage)? {
                    let path = entry.map_err(storage)?.path();
                    if path.extension().is_some_and(|e| e == "json") {
                        let text = fs::read_to_string(&path).map_err(storage)?;
                        let report: RootCauseReport = serde_json::from_str(&text)
                            .map_err(|e| ServiceError::Storage(format!("{}: {e}", path.display())))?;
                        windows.insert(report.window_id, WindowState { closed: true, busy: false, analyzed: true });
                        reports.insert(report.window_id, Arc::new(report));
                    }
                }
                let events_path = dir.join("events.jsonl");
                let mut past = Vec::new();
                if events_path.exists() {
                    for line in fs::read_to_string(&events_path).map_err(storage)?.lines() {
                        if let Ok(ev) = serde_json::from_str::<AuditEvent>(line) {
                            past.push(ev);
                        }
                    }
                }
                let file = OpenOptions::new().create(true).append(true).open(&events_path).map_err(storage)?;
                (log, EventLog { events: past, sink: Some(BufWriter::new(file)) })
            }
        };
        for e in log.entries() {
            if let Some(w) = config.window_of(e.timestamp) {
                let c: &mut WindowCounts = counts.entry(w).or_default();
                c.entries += 1;
                c.drifted += e.drift as usize;
            }
        }
        let clean = ModelVersion {
            version_id: CLEAN_VERSION_ID.into(),
            cause: Itemset::new(),
            params: base.params.clone(),
            base_id: BASE_ID.into(),
            created_at: config.window_origin,
            last_updated: config.window_origin,
            risk_ratio_at_creation: RiskRatio::Undefined,
            parent: None,
            origin: "initial".into(),
        };
        let pool = ModelPool::new(config.pool, clean).map_err(|e| ServiceError::Config(e.to_string()))?;
        Ok(Self {
            mode: RwLock::new(config.mode),
            config,
            base: Arc::new(base),
            weather,
            log: RwLock::new(log),
            counts: Mutex::new(counts),
            samples: Mutex::new(BTreeMap::new()),
            windows: Mutex::new(windows),
            reports: RwLock::new(reports),
            alerts: RwLock::new(Vec::new()),
            pool: RwLock::new(PoolSnapshot { generation: 0, pool: Arc::new(pool) }),
            pool_writer: Mutex::new(()),
            events: Mutex::new(events),
            next_version: AtomicU64::new(1),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn base_model(&self) -> &ToyClassifier {
        &self.base
    }

    fn enrich(
        &self,
        device_id: &str,
        location: &str,
        timestamp: i64,
        extra: &BTreeMap<String, String>,
    ) -> Result<BTreeMap<String, String>, ServiceError> {
        if location.is_empty() {
            return Err(ServiceError::invalid("location", "must be non-empty"));
        }
        for key in ["device_id", "location"] {
            if extra.contains_key(key) {
                return Err(ServiceError::invalid(key, "must be given as a top-level field"));
            }
        }
        let mut attrs = extra.clone();
        attrs.insert("device_id".into(), device_id.into());
        attrs.insert("location".into(), location.into());
        if !attrs.contains_key("weather") {
            let w = self.weather.lookup(location, timestamp).unwrap_or_else(|| UNKNOWN_WEATHER.into());
            attrs.insert("weather".into(), w);
        }
        Ok(attrs)
    }

    fn window_for(&self, timestamp: i64) -> Result<u64, ServiceError> {
        self.config
            .window_of(timestamp)
            .ok_or_else(|| ServiceError::invalid("timestamp", "precedes the first window"))
    }

    /// Enriches and appends one drift-log entry.
    pub fn ingest_entry(&self, raw: RawEntry) -> Result<EntryAck, ServiceError> {
        let window_id = self.window_for(raw.timestamp)?;
        let attributes = self.enrich(&raw.device_id, &raw.location, raw.timestamp, &raw.attributes)?;
        if raw.model_version_id.is_empty() {
            return Err(ServiceError::invalid("model_version_id", "must be non-empty"));
        }
        let drift = raw.drift;
        let entry = DriftLogEntry {
            timestamp: raw.timestamp,
            device_id: raw.device_id,
            model_version_id: raw.model_version_id,
            attributes,
            drift,
        };
        let id = self.log.write().append(entry)?;
        let mut counts = self.counts.lock();
        let c = counts.entry(window_id).or_default();
        c.entries += 1;
        c.drifted += drift as usize;
        Ok(EntryAck { id, window_id })
    }

    /// Buffers one uplinked input under the window of its timestamp.
    pub fn ingest_sample(&self, raw: RawSample) -> Result<SampleAck, ServiceError> {
        let window_id = self.window_for(raw.timestamp)?;
        if raw.device_id.is_empty() {
            return Err(ServiceError::invalid("device_id", "must be non-empty"));
        }
        if raw.features.len() != self.base.dim() {
            return Err(ServiceError::invalid(
                "features",
                format!("expected {} values, got {}", self.base.dim(), raw.features.len()),
            ));
        }
        if raw.features.iter().any(|v| !v.is_finite()) {
            return Err(ServiceError::invalid("features", "values must be finite"));
        }
        let attributes = self.enrich(&raw.device_id, &raw.location, raw.timestamp, &raw.attributes)?;
        if let Some(extra) = attributes.keys().find(|k| !self.config.schema.contains(k)) {
            return Err(ServiceError::invalid(extra.clone(), "attribute not declared in schema"));
        }
        let mut samples = self.samples.lock();
        let buf = samples.entry(window_id).or_default();
        buf.push(BufferedSample { attributes, features: raw.features });
        Ok(SampleAck { window_id, buffered: buf.len() })
    }

    /// Number of samples buffered for a window.
    pub fn buffered_samples(&self, window_id: u64) -> usize {
        self.samples.lock().get(&window_id).map_or(0, Vec::len)
    }

    /// Snapshot of the drift-log entries in a window.
    pub fn window_entries(&self, window_id: u64) -> Result<LogWindow, ServiceError> {
        let (start, end) = self.config.window_bounds(window_id);
        Ok(self.log.read().window(start, end)?)
    }

    pub fn entry_count(&self) -> usize {
        self.log.read().len()
    }

    pub fn mode(&self) -> OperatingMode {
        *self.mode.read()
    }

    /// Sets the mode; every call is logged, including no-op ones.
    pub fn set_mode(&self, mode: OperatingMode) -> OperatingMode {
        let from = {
            let mut m = self.mode.write();
            std::mem::replace(&mut *m, mode)
        };
        self.record(EventKind::ModeChanged { from, to: mode });
        from
    }

    /// Claims a window for analysis or adaptation.
    pub fn try_lock_window(&self, window_id: u64) -> Result<WindowTicket<'_>, ServiceError> {
        let mut windows = self.windows.lock();
        let s = windows.entry(window_id).or_default();
        if s.busy {
            return Err(ServiceError::Conflict(format!("window {window_id} is already being processed")));
        }
        s.busy = true;
        Ok(WindowTicket { svc: self, window_id })
    }

    /// Marks a window closed. In autopilot, analysis (and adaptation) of a
    /// not yet analyzed window follows immediately.
    pub fn close_window(&self, window_id: u64) -> Result<CloseOutcome, ServiceError> {
        let (already_closed, analyzed) = {
            let mut windows = self.windows.lock();
            let s = windows.entry(window_id).or_default();
            let was = s.closed;
            s.closed = true;
            (was, s.analyzed)
        };
        if !already_closed {
            self.record(EventKind::WindowClosed { window_id });
            let keep_from = window_id.saturating_sub(self.config.sample_retention_windows);
            self.samples.lock().retain(|w, _| *w >= keep_from);
        }
        let analysis = if self.mode() == OperatingMode::Autopilot && !analyzed {
            Some(self.run_analysis(window_id)?)
        } else {
            None
        };
        Ok(CloseOutcome { window_id, already_closed, analysis })
    }

    /// Root cause analysis of a closed window. At most one report per window
    /// is ever persisted; repeated or concurrent triggers are conflicts.
    pub fn run_analysis(&self, window_id: u64) -> Result<AnalysisOutcome, ServiceError> {
        let ticket = self.try_lock_window(window_id)?;
        {
            let windows = self.windows.lock();
            let s = windows[&window_id];
            if !s.closed {
                return Err(ServiceError::Conflict(format!("window {window_id} is not closed")));
            }
            if s.analyzed {
                return Err(ServiceError::Conflict(format!("window {window_id} was already analyzed")));
            }
        }
        let (_, end) = self.config.window_bounds(window_id);
        let window = self.window_entries(window_id)?;
        let report = analyze_with(window_id, &window, &self.config.thresholds, self.config.analysis_mode)
            .map_err(|e| ServiceError::Config(e.to_string()))?;
        if let Some(dir) = &self.config.data_dir {
            let path = report_path(dir, window_id);
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            fs::write(&path, text).map_err(storage)?;
        }
        let report = Arc::new(report);
        self.reports.write().insert(window_id, report.clone());
        self.windows.lock().get_mut(&window_id).expect("locked window exists").analyzed = true;

        let alert = (!report.causes.is_empty()).then(|| {
            let mut alerts = self.alerts.write();
            let alert = Alert {
                id: alerts.len() as u64 + 1,
                window_id,
                causes: summarize(&report),
                created_at: end,
                state: AlertState::Open,
            };
            alerts.push(alert.clone());
            alert
        });
        self.record(EventKind::AnalysisCompleted {
            window_id,
            causes: report.causes.iter().map(|c| c.itemset.clone()).collect(),
            alert_id: alert.as_ref().map(|a| a.id),
        });

        let adaptation = if self.mode() == OperatingMode::Autopilot && alert.is_some() {
            let all: Vec<usize> = (0..report.causes.len()).collect();
            Some(self.adapt_window(&ticket, &report, &all, Origin::Autopilot)?)
        } else {
            None
        };
        let alert = alert.map(|a| self.alert(a.id).expect("alert just stored"));
        Ok(AnalysisOutcome { report, alert, adaptation })
    }

    /// Operator-triggered adaptation of selected causes (manual mode only).
    /// All ids are validated before anything runs.
    pub fn trigger_adaptation(&self, cause_ids: &[String]) -> Result<AdaptationOutcome, ServiceError> {
        if self.mode() != OperatingMode::Manual {
            return Err(ServiceError::Conflict("adaptation triggers are only accepted in manual mode".into()));
        }
        self.orchestrate_adaptation(cause_ids)
    }

    /// Adapts the given causes regardless of mode, grouped per window.
    pub fn orchestrate_adaptation(&self, cause_ids: &[String]) -> Result<AdaptationOutcome, ServiceError> {
        if cause_ids.is_empty() {
            return Err(ServiceError::invalid("cause_ids", "must list at least one cause"));
        }
        let mut by_window: BTreeMap<u64, BTreeSet<usize>> = BTreeMap::new();
        {
            let reports = self.reports.read();
            for id in cause_ids {
                let (w, c) = parse_cause_id(id)
                    .ok_or_else(|| ServiceError::invalid("cause_ids", format!("malformed cause id {id:?}")))?;
                let known = reports.get(&w).is_some_and(|r| c < r.causes.len());
                if !known {
                    return Err(ServiceError::NotFound(format!("cause {id}")));
                }
                by_window.entry(w).or_default().insert(c);
            }
        }
        let mut out = AdaptationOutcome::default();
        for (w, causes) in by_window {
            let ticket = self.try_lock_window(w)?;
            let report = self.reports.read()[&w].clone();
            let selected: Vec<usize> = causes.into_iter().collect();
            let part = self.adapt_window(&ticket, &report, &selected, Origin::Operator)?;
            out.created.extend(part.created);
            out.skipped.extend(part.skipped);
            out.evicted.extend(part.evicted);
            out.pool_generation = part.pool_generation;
        }
        Ok(out)
    }

    fn adapt_window(
        &self,
        ticket: &WindowTicket<'_>,
        report: &RootCauseReport,
        selected: &[usize],
        origin: Origin,
    ) -> Result<AdaptationOutcome, ServiceError> {
        let window_id = ticket.window_id();
        let (_, end) = self.config.window_bounds(window_id);
        let alert_id = self.alerts.read().iter().find(|a| a.window_id == window_id).map(|a| a.id);
        let origin_tag = match (origin, alert_id) {
            (Origin::Autopilot, _) => format!("autopilot/w{window_id}"),
            (Origin::Operator, Some(a)) => format!("alert-{a}"),
            (Origin::Operator, None) => format!("operator/w{window_id}"),
        };
        let batch_min = self.config.adapt.batch_size;
        let first = window_id.saturating_sub(self.config.sample_retention_windows - 1);
        let samples: Vec<BufferedSample> = {
            let buffers = self.samples.lock();
            buffers.range(first..=window_id).flat_map(|(_, v)| v.iter().cloned()).collect()
        };

        let _writer = self.pool_writer.lock();
        let mut pool = (*self.pool.read().pool).clone();
        let parent = pool.clean().clone();
        let start_model = parent.classifier(&self.base).map_err(|e| ServiceError::Storage(e.to_string()))?;
        let mut out = AdaptationOutcome::default();
        let mut pending_events = Vec::new();

        let mut jobs: Vec<(String, Itemset, RiskRatio)> = selected
            .iter()
            .map(|&c| {
                let cause = &report.causes[c];
                (format!("w{window_id}-c{c}"), cause.itemset.clone(), cause.metrics.risk_ratio)
            })
            .collect();
        if self.config.adapt_clean && origin == Origin::Autopilot {
            jobs.push((format!("w{window_id}-clean"), Itemset::new(), RiskRatio::Undefined));
        }

        for (cause_id, itemset, rr) in jobs {
            let batch: Vec<Vec<f64>> = if itemset.is_empty() {
                // clean batch: samples no cause of this window explains
                samples
                    .iter()
                    .filter(|s| !report.causes.iter().any(|c| c.itemset.matches(&s.attributes)))
                    .map(|s| s.features.clone())
                    .collect()
            } else {
                samples.iter().filter(|s| itemset.matches(&s.attributes)).map(|s| s.features.clone()).collect()
            };
            if batch.len() < batch_min {
                let reason = format!("starved: {} samples, need {batch_min}", batch.len());
                pending_events.push(EventKind::AdaptationSkipped {
                    cause_id: cause_id.clone(),
                    cause: itemset.clone(),
                    reason: reason.clone(),
                });
                out.skipped.push(SkippedCause { cause_id, itemset, samples: batch.len(), reason });
                continue;
            }
            let cfg = driftwatch_core::adapt::AdaptConfig { seed: self.config.adapt.seed ^ window_id, ..self.config.adapt.clone() };
            let adapted = match adapt(&start_model, &batch, &cfg) {
                Ok(a) => a,
                Err(e) => {
                    let reason = format!("adaptation failed: {e}");
                    pending_events.push(EventKind::AdaptationSkipped {
                        cause_id: cause_id.clone(),
                        cause: itemset.clone(),
                        reason: reason.clone(),
                    });
                    out.skipped.push(SkippedCause { cause_id, itemset, samples: batch.len(), reason });
                    continue;
                }
            };
            let n = self.next_version.fetch_add(1, Ordering::SeqCst);
            let version = ModelVersion {
                version_id: format!("v{n}"),
                cause: itemset.clone(),
                params: adapted.model.params,
                base_id: parent.base_id.clone(),
                created_at: end,
                last_updated: end,
                risk_ratio_at_creation: rr,
                parent: Some(parent.version_id.clone()),
                origin: origin_tag.clone(),
            };
            let evictions = pool.insert(version.clone()).map_err(|e| ServiceError::Storage(e.to_string()))?;
            let refused = evictions.iter().any(|e| e.reason == EvictionReason::Refused);
            for ev in evictions {
                pending_events.push(EventKind::VersionEvicted {
                    version_id: ev.version.version_id.clone(),
                    cause: ev.version.cause.clone(),
                    reason: ev.reason,
                });
                out.evicted.push(EvictedVersion {
                    version_id: ev.version.version_id,
                    cause: ev.version.cause,
                    reason: ev.reason,
                });
            }
            if refused {
                let reason = "refused by pool: a broader version already covers it".to_string();
                out.skipped.push(SkippedCause { cause_id, itemset, samples: batch.len(), reason });
                continue;
            }
            pending_events.push(EventKind::VersionCreated {
                version_id: version.version_id.clone(),
                cause: itemset,
                window_id,
                origin: origin_tag.clone(),
                samples: batch.len(),
            });
            out.created.push(version);
        }

        {
            let mut snap = self.pool.write();
            if !out.created.is_empty() {
                *snap = PoolSnapshot { generation: snap.generation + 1, pool: Arc::new(pool) };
            }
            out.pool_generation = snap.generation;
        }
        if out.created.iter().any(|v| !v.is_clean()) {
            if let Some(id) = alert_id {
                if let Some(a) = self.alerts.write().iter_mut().find(|a| a.id == id) {
                    a.state = AlertState::Adapted;
                }
            }
        }
        for ev in pending_events {
            self.record(ev);
        }
        Ok(out)
    }

    pub fn acknowledge_alert(&self, id: u64) -> Result<Alert, ServiceError> {
        let alert = {
            let mut alerts = self.alerts.write();
            let a = alerts
                .iter_mut()
                .find(|a| a.id == id)
                .ok_or_else(|| ServiceError::NotFound(format!("alert {id}")))?;
            if a.state == AlertState::Open {
                a.state = AlertState::Acknowledged;
            }
            a.clone()
        };
        self.record(EventKind::AlertAcknowledged { alert_id: id });
        Ok(alert)
    }

    pub fn alerts(&self) -> Vec<Alert> {
        self.alerts.read().clone()
    }

    pub fn alert(&self, id: u64) -> Option<Alert> {
        self.alerts.read().iter().find(|a| a.id == id).cloned()
    }

    pub fn report(&self, window_id: u64) -> Option<Arc<RootCauseReport>> {
        self.reports.read().get(&window_id).cloned()
    }

    pub fn pool_snapshot(&self) -> PoolSnapshot {
        self.pool.read().clone()
    }

    pub fn pool_view(&self) -> PoolView {
        let snap = self.pool_snapshot();
        PoolView {
            generation: snap.generation,
            capacity: snap.pool.config().capacity,
            subsumption: snap.pool.config().subsumption,
            versions: snap.pool.export(),
        }
    }

    /// Per-window series from the first to the last window holding entries.
    pub fn timeline(&self, metric: TimelineMetric) -> Vec<TimelinePoint> {
        let counts = self.counts.lock();
        let (Some(&first), Some(&last)) = (counts.keys().next(), counts.keys().next_back()) else {
            return Vec::new();
        };
        (first..=last)
            .map(|w| {
                let c = counts.get(&w).copied().unwrap_or_default();
                let rate = (c.entries > 0).then(|| c.drifted as f64 / c.entries as f64);
                let value = match metric {
                    TimelineMetric::DriftRate => rate,
                    TimelineMetric::AccuracyProxy => rate.map(|r| 1.0 - r),
                    TimelineMetric::Entries => Some(c.entries as f64),
                    TimelineMetric::Drifted => Some(c.drifted as f64),
                };
                let (start, end) = self.config.window_bounds(w);
                TimelinePoint { window_id: w, start, end, value }
            })
            .collect()
    }

    /// Audit events with `seq >= since`.
    pub fn events(&self, since: u64) -> Vec<AuditEvent> {
        self.events.lock().events.iter().filter(|e| e.seq >= since).cloned().collect()
    }

    fn record(&self, kind: EventKind) {
        let mut log = self.events.lock();
        let seq = log.events.last().map_or(0, |e| e.seq + 1);
        let event = AuditEvent { seq, kind };
        if let Some(sink) = log.sink.as_mut() {
            // the audit trail is best effort; a failed write must not fail the
            // operation it describes
            let line = serde_json::to_string(&event).expect("event serializes");
            let _ = writeln!(sink, "{line}").and_then(|_| sink.flush());
        }
        log.events.push(event);
    }
}

fn storage(e: std::io::Error) -> ServiceError {
    ServiceError::Storage(e.to_string())
}

fn summarize(report: &RootCauseReport) -> Vec<CauseSummary> {
    report
        .causes
        .iter()
        .enumerate()
        .map(|(i, c)| CauseSummary {
            cause_id: format!("w{}-c{i}", report.window_id),
            itemset: c.itemset.clone(),
            metrics: c.metrics.clone(),
            rank: c.rank,
        })
        .collect()
}

/// Parses `w{window}-c{index}`.
pub fn parse_cause_id(id: &str) -> Option<(u64, usize)> {
    let rest = id.strip_prefix('w')?;
    let (w, c) = rest.split_once("-c")?;
    Some((w.parse().ok()?, c.parse().ok()?))
}

/// Data directory layout, for tools that inspect a stopped service.
pub fn report_path(data_dir: &std::path::Path, window_id: u64) -> PathBuf {
    data_dir.join("reports").join(format!("window-{window_id}.json"))
}
