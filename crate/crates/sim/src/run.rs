//! Replays a stream window by window under one adaptation strategy and
//! scores it against the sealed labels.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use driftwatch_core::adapt::adapt;
use driftwatch_core::detect::{detect_msp, LogitVector};
use driftwatch_core::itemset::Itemset;
use driftwatch_core::model::{train_clean, Corruptor, SyntheticTask, ToyClassifier};
use driftwatch_core::pool::ModelPool;
use driftwatch_core::weather::WeatherSchedule;
use driftwatch_service::{MonitorService, OperatingMode, RawEntry, RawSample, ScheduleWeather, ServiceConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::SimConfig;
use crate::stream::{generate_stream, Event, SealedLabels, Stream};
use crate::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    NoAdapt,
    AdaptAll,
    ByCause,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::NoAdapt, Strategy::AdaptAll, Strategy::ByCause];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::NoAdapt => "no-adapt",
            Strategy::AdaptAll => "adapt-all",
            Strategy::ByCause => "by-cause",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| SimError::Config(format!("unknown strategy {s:?}; expected no-adapt, adapt-all or by-cause")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub window_id: usize,
    pub start: i64,
    pub end: i64,
    pub events: usize,
    pub drifted_events: usize,
    pub uplinked: usize,
    /// Drift-log entries the monitor holds for the window (by-cause only).
    pub entries_logged: Option<usize>,
    pub accuracy: f64,
    pub accuracy_drifted: Option<f64>,
    pub accuracy_clean: Option<f64>,
    /// Accuracy over all events up to the end of this window.
    pub cumulative_accuracy: f64,
    /// Share of inferences the serving models flagged.
    pub detection_rate: f64,
    /// By-cause versions in the pool after this window's push.
    pub versions: usize,
    pub causes: Vec<Itemset>,
    pub adapted: Vec<Itemset>,
    pub skipped: Vec<Itemset>,
}

/// Detection rates of one planted cause.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CauseDetection {
    pub cause: String,
    pub events: usize,
    /// Clean model's flag rate on this cause's inputs.
    pub pre_rate: f64,
    /// Flag rate on this cause's inputs served by an adapted version whose
    /// cause they match; `None` if no such inference happened.
    pub post_rate: Option<f64>,
    pub post_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub strategy: Strategy,
    pub seed: u64,
    pub events: usize,
    pub windows: Vec<WindowSummary>,
    /// Means of the per-window accuracies over every window but the first,
    /// which all strategies serve with the clean model.
    pub mean_accuracy: f64,
    pub mean_accuracy_drifted: Option<f64>,
    pub mean_accuracy_clean: Option<f64>,
    pub detection: Vec<CauseDetection>,
    /// Clean model's flag rate on clean inputs.
    pub clean_detection_rate: f64,
    /// SHA-256 over the rest of the report.
    pub hash: String,
}

impl SimReport {
    pub fn version_counts(&self) -> Vec<usize> {
        self.windows.iter().map(|w| w.versions).collect()
    }

    /// Fixed-width per-window table.
    pub fn table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "    -".to_string(), |v| format!("{:5.1}", 100.0 * v));
        let mut out = format!(
            "strategy {}  seed {}  events {}\n{:>6} {:>7} {:>7} {:>6} {:>6} {:>6} {:>6} {:>8}  causes\n",
            self.strategy, self.seed, self.events, "window", "events", "drifted", "acc", "acc_d", "acc_c", "det", "versions"
        );
        for w in &self.windows {
            let causes: Vec<String> = w.causes.iter().map(|c| c.to_string()).collect();
            out.push_str(&format!(
                "{:>6} {:>7} {:>7} {:>6} {:>6} {:>6} {:>6} {:>8}  {}\n",
                w.window_id,
                w.events,
                w.drifted_events,
                pct(Some(w.accuracy)),
                pct(w.accuracy_drifted),
                pct(w.accuracy_clean),
                pct(Some(w.detection_rate)),
                w.versions,
                causes.join(" ")
            ));
        }
        out.push_str(&format!(
            "mean (windows 1..) acc {} drifted {} clean {}\n",
            pct(Some(self.mean_accuracy)),
            pct(self.mean_accuracy_drifted),
            pct(self.mean_accuracy_clean)
        ));
        out
    }
}

/// Everything a run needs that does not depend on the strategy.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: SimConfig,
    pub task: SyntheticTask,
    pub model: ToyClassifier,
    pub schedule: WeatherSchedule,
    pub stream: Stream,
}

impl Prepared {
    pub fn new(config: &SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let task = SyntheticTask::generate(&config.task, config.model_seed)?;
        let model = train_clean(&task, config.model_seed)?;
        Self::with_model(config, task, model)
    }

    /// Reuses an already trained model for a new stream.
    pub fn with_model(config: &SimConfig, task: SyntheticTask, model: ToyClassifier) -> Result<Self, SimError> {
        config.validate()?;
        let corruptor = Corruptor::new(&task, config.model_seed);
        let schedule = config.schedule()?;
        let stream = generate_stream(config, &task, &corruptor, &schedule)?;
        Ok(Self { config: config.clone(), task, model, schedule, stream })
    }
}

pub fn run(config: &SimConfig, strategy: Strategy) -> Result<SimReport, SimError> {
    run_prepared(&Prepared::new(config)?, strategy)
}

/// Per-cause detection rates from a by-cause run.
pub fn detection_evolution(config: &SimConfig) -> Result<Vec<CauseDetection>, SimError> {
    Ok(run(config, Strategy::ByCause)?.detection)
}

#[derive(Debug, Default, Clone, Copy)]
struct Acc {
    n: usize,
    hit: usize,
}

impl Acc {
    fn add(&mut self, hit: bool) {
        self.n += 1;
        self.hit += hit as usize;
    }

    fn rate(self) -> Option<f64> {
        (self.n > 0).then(|| self.hit as f64 / self.n as f64)
    }
}

/// Scores predictions against the sealed labels; nothing else sees them.
struct Evaluator<'a> {
    labels: &'a SealedLabels,
    clean_flags: Acc,
    pre: BTreeMap<String, Acc>,
    post: BTreeMap<String, Acc>,
    cumulative: Acc,
}

struct WindowAcc {
    all: Acc,
    drifted: Acc,
    clean: Acc,
    flagged: Acc,
}

impl<'a> Evaluator<'a> {
    fn new(labels: &'a SealedLabels) -> Self {
        Self {
            labels,
            clean_flags: Acc::default(),
            pre: BTreeMap::new(),
            post: BTreeMap::new(),
            cumulative: Acc::default(),
        }
    }

    /// `served_cause` is the cause of the version that served the input.
    fn score(
        &mut self,
        w: &mut WindowAcc,
        event: &Event,
        predicted: usize,
        flagged: bool,
        clean_flagged: bool,
        served_cause: &Itemset,
    ) {
        let truth = self.labels.get(event.index);
        let hit = predicted == truth.label;
        w.all.add(hit);
        w.flagged.add(flagged);
        self.cumulative.add(hit);
        match &truth.cause {
            Some(c) => {
                w.drifted.add(hit);
                self.pre.entry(c.clone()).or_default().add(clean_flagged);
                let post = self.post.entry(c.clone()).or_default();
                if served_cause.get("weather") == Some(c.as_str()) {
                    post.add(flagged);
                }
            }
            None => {
                w.clean.add(hit);
                self.clean_flags.add(clean_flagged);
            }
        }
    }
}

fn attributes(e: &Event) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("device_id".to_string(), e.device_id.clone()),
        ("location".to_string(), e.location.clone()),
        ("weather".to_string(), e.weather.as_str().to_string()),
    ])
}

fn service_config(cfg: &SimConfig) -> ServiceConfig {
    ServiceConfig {
        mode: OperatingMode::Autopilot,
        analysis_mode: cfg.analysis_mode,
        thresholds: cfg.thresholds,
        pool: cfg.pool,
        adapt: cfg.adapt.clone(),
        window_origin: cfg.start_seconds(),
        window_seconds: cfg.window_seconds(),
        sample_retention_windows: cfg.sample_retention_windows,
        adapt_clean: cfg.adapt_clean,
        data_dir: None,
        ..ServiceConfig::default()
    }
}

/// Device-side inference: prediction plus MSP drift verdict.
fn infer(model: &ToyClassifier, x: &[f64], threshold: f64) -> Result<(usize, bool), SimError> {
    let logits = LogitVector::new(model.predict(x)?)?;
    let verdict = detect_msp(&logits, threshold)?;
    Ok((logits.argmax(), verdict.drift))
}

pub fn run_prepared(prep: &Prepared, strategy: Strategy) -> Result<SimReport, SimError> {
    let cfg = &prep.config;
    let clean = &prep.model;
    let threshold = cfg.msp_threshold;
    let mut eval = Evaluator::new(&prep.stream.labels);

    let service = match strategy {
        Strategy::ByCause => Some(MonitorService::new(
            service_config(cfg),
            clean.clone(),
            Arc::new(ScheduleWeather::new(prep.schedule.clone())),
        )?),
        _ => None,
    };
    // device-side replica of the published pool
    let mut replica: Option<(u64, Arc<ModelPool>)> = service.as_ref().map(|s| {
        let snap = s.pool_snapshot();
        (snap.generation, snap.pool)
    });
    let mut classifiers: HashMap<String, ToyClassifier> = HashMap::new();
    let mut adapt_all_model = clean.clone();
    let none = Itemset::new();

    let mut summaries = Vec::with_capacity(cfg.windows);
    for (w, events) in prep.stream.windows(cfg.windows).into_iter().enumerate() {
        let mut acc = WindowAcc { all: Acc::default(), drifted: Acc::default(), clean: Acc::default(), flagged: Acc::default() };
        let mut uplinked: Vec<Vec<f64>> = Vec::new();
        for e in events {
            let (_, clean_flagged) = infer(clean, &e.features, threshold)?;
            let (predicted, flagged, served_cause, version_id) = match strategy {
                Strategy::NoAdapt => {
                    let (p, f) = infer(clean, &e.features, threshold)?;
                    (p, f, &none, "clean".to_string())
                }
                Strategy::AdaptAll => {
                    let (p, f) = infer(&adapt_all_model, &e.features, threshold)?;
                    (p, f, &none, "adapt-all".to_string())
                }
                Strategy::ByCause => {
                    let pool = &replica.as_ref().expect("by-cause has a replica").1;
                    let version = pool.select(&attributes(e));
                    let model = classifiers
                        .entry(version.version_id.clone())
                        .or_insert_with(|| version.classifier(clean).expect("pool params fit the base model"));
                    let (p, f) = infer(model, &e.features, threshold)?;
                    (p, f, &version.cause, version.version_id.clone())
                }
            };
            eval.score(&mut acc, e, predicted, flagged, clean_flagged, served_cause);
            if let Some(svc) = &service {
                svc.ingest_entry(RawEntry {
                    timestamp: e.timestamp,
                    device_id: e.device_id.clone(),
                    model_version_id: version_id,
                    location: e.location.clone(),
                    drift: flagged,
                    attributes: BTreeMap::new(),
                })?;
                if e.uplink {
                    svc.ingest_sample(RawSample {
                        timestamp: e.timestamp,
                        device_id: e.device_id.clone(),
                        location: e.location.clone(),
                        features: e.features.clone(),
                        attributes: BTreeMap::new(),
                    })?;
                }
            }
            if e.uplink {
                uplinked.push(e.features.clone());
            }
        }

        let (start, end) = (cfg.start_seconds() + w as i64 * cfg.window_seconds(), cfg.start_seconds() + (w as i64 + 1) * cfg.window_seconds());
        let mut summary = WindowSummary {
            window_id: w,
            start,
            end: end.min(cfg.end_seconds()),
            events: events.len(),
            drifted_events: acc.drifted.n,
            uplinked: uplinked.len(),
            entries_logged: None,
            accuracy: acc.all.rate().unwrap_or(0.0),
            accuracy_drifted: acc.drifted.rate(),
            accuracy_clean: acc.clean.rate(),
            cumulative_accuracy: eval.cumulative.rate().unwrap_or(0.0),
            detection_rate: acc.flagged.rate().unwrap_or(0.0),
            versions: 0,
            causes: Vec::new(),
            adapted: Vec::new(),
            skipped: Vec::new(),
        };
        match strategy {
            Strategy::NoAdapt => {}
            Strategy::AdaptAll => {
                // one model, continuously adapted on everything uplinked
                if uplinked.len() >= cfg.adapt.batch_size {
                    if let Ok(a) = adapt(&adapt_all_model, &uplinked, &cfg.adapt) {
                        adapt_all_model = a.model;
                    }
                }
            }
            Strategy::ByCause => {
                let svc = service.as_ref().expect("by-cause has a service");
                summary.entries_logged = Some(svc.window_entries(w as u64)?.len());
                let closed = svc.close_window(w as u64)?;
                if let Some(analysis) = closed.analysis {
                    summary.causes = analysis.report.causes.iter().map(|c| c.itemset.clone()).collect();
                    if let Some(adaptation) = analysis.adaptation {
                        summary.adapted = adaptation.created.iter().map(|v| v.cause.clone()).collect();
                        summary.skipped = adaptation.skipped.iter().map(|s| s.itemset.clone()).collect();
                    }
                }
                let snap = svc.pool_snapshot();
                if replica.as_ref().is_none_or(|(g, _)| *g != snap.generation) {
                    replica = Some((snap.generation, snap.pool));
                }
                let pool = &replica.as_ref().expect("replica set").1;
                summary.versions = pool.versions().iter().filter(|v| !v.is_clean()).count();
            }
        }
        summaries.push(summary);
    }

    let tail = |f: fn(&WindowSummary) -> Option<f64>| {
        let vals: Vec<f64> = summaries.iter().skip(1).filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let mean_accuracy = tail(|w| Some(w.accuracy)).unwrap_or(0.0);
    let mean_accuracy_drifted = tail(|w| w.accuracy_drifted);
    let mean_accuracy_clean = tail(|w| w.accuracy_clean);
    let detection = eval
        .pre
        .iter()
        .map(|(cause, pre)| {
            let post = eval.post.get(cause).copied().unwrap_or_default();
            CauseDetection {
                cause: cause.clone(),
                events: pre.n,
                pre_rate: pre.rate().unwrap_or(0.0),
                post_rate: post.rate(),
                post_events: post.n,
            }
        })
        .collect();
    let mut report = SimReport {
        strategy,
        seed: cfg.seed,
        events: prep.stream.events.len(),
        windows: summaries,
        mean_accuracy,
        mean_accuracy_drifted,
        mean_accuracy_clean,
        detection,
        clean_detection_rate: eval.clean_flags.rate().unwrap_or(0.0),
        hash: String::new(),
    };
    report.hash = report_hash(&report);
    Ok(report)
}

/// SHA-256 (hex) of the report's JSON with the hash field blanked.
pub fn report_hash(report: &SimReport) -> String {
    let mut r = report.clone();
    r.hash.clear();
    let bytes = serde_json::to_vec(&r).expect("report serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}
