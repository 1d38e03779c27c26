//! Workload generation: devices, Poisson arrivals, per-location class laws
//! and weather-bound corruption.
//!
//! Ground truth (class label and planted cause) never rides on an [`Event`];
//! it goes into [`SealedLabels`], which only evaluation reads.

use std::collections::BTreeMap;

use driftwatch_core::model::{sample_categorical, Corruptor, SyntheticTask};
use driftwatch_core::weather::{Weather, WeatherSchedule, SECONDS_PER_DAY};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::SimError;

/// One inference request as a device sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub index: usize,
    pub timestamp: i64,
    pub window: usize,
    pub device_id: String,
    pub location: String,
    /// Weather at the device, as its local weather source reports it.
    pub weather: Weather,
    pub features: Vec<f64>,
    /// Whether the device uplinks this input.
    pub uplink: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub label: usize,
    /// Weather that corrupted the input, `None` when clean.
    pub cause: Option<String>,
}

/// Ground truth indexed by event index. Only evaluation code holds one.
#[derive(Debug, Clone)]
pub struct SealedLabels {
    truth: Vec<GroundTruth>,
}

impl SealedLabels {
    pub fn get(&self, index: usize) -> &GroundTruth {
        &self.truth[index]
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Stream {
    /// Sorted by `(timestamp, device_id)`.
    pub events: Vec<Event>,
    pub labels: SealedLabels,
}

impl Stream {
    /// Events of each window, in order.
    pub fn windows(&self, count: usize) -> Vec<&[Event]> {
        let mut out = Vec::with_capacity(count);
        let mut i = 0;
        for w in 0..count {
            let j = i + self.events[i..].iter().take_while(|e| e.window == w).count();
            out.push(&self.events[i..j]);
            i = j;
        }
        out
    }
}

/// Zipf(`alpha`) weights over `k` classes, in rank order.
pub fn zipf_weights(k: usize, alpha: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=k).map(|r| (r as f64).powf(-alpha)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Class distribution of every location: explicit when configured,
/// otherwise Zipf over a per-location random class order.
pub fn class_distributions(cfg: &SimConfig) -> BTreeMap<String, Vec<f64>> {
    let k = cfg.task.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c1a5);
    cfg.locations
        .iter()
        .map(|loc| {
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(&mut rng);
            let probs = match cfg.class_distributions.get(loc) {
                Some(p) => {
                    let total: f64 = p.iter().sum();
                    p.iter().map(|v| v / total).collect()
                }
                None => {
                    let ranked = zipf_weights(k, cfg.zipf_alpha);
                    let mut probs = vec![0.0; k];
                    for (rank, &class) in order.iter().enumerate() {
                        probs[class] = ranked[rank];
                    }
                    probs
                }
            };
            (loc.clone(), probs)
        })
        .collect()
}

pub fn device_id(location: &str, index: usize) -> String {
    let slug: String = location
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    format!("{slug}-{index:02}")
}

/// Builds the time-ordered request stream.
pub fn generate_stream(
    cfg: &SimConfig,
    task: &SyntheticTask,
    corruptor: &Corruptor,
    schedule: &WeatherSchedule,
) -> Result<Stream, SimError> {
    cfg.validate()?;
    if task.dim != cfg.task.dim || task.num_classes != cfg.task.num_classes {
        return Err(SimError::Config("task does not match the configured task shape".into()));
    }
    let classes = class_distributions(cfg);
    let poisson = Poisson::new(cfg.arrivals_per_day).map_err(|e| SimError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = cfg.start_seconds();

    let mut raw: Vec<(Event, GroundTruth)> = Vec::new();
    for day in 0..cfg.days {
        let day_start = start + day as i64 * SECONDS_PER_DAY;
        for loc in &cfg.locations {
            let weather = schedule
                .lookup(loc, day_start)
                .ok_or_else(|| SimError::Config(format!("no weather for {loc:?} on day {day}")))?;
            let drifting = cfg.causes.iter().any(|c| c == weather.as_str());
            for d in 0..cfg.devices_per_location {
                let n = poisson.sample(&mut rng) as usize;
                for _ in 0..n {
                    let timestamp = day_start + rng.random_range(0..SECONDS_PER_DAY);
                    let label = sample_categorical(&classes[loc], &mut rng);
                    let clean = task.sample_class(label, &mut rng);
                    let corrupt = drifting && rng.random::<f64>() < cfg.drift_probability;
                    let noise_seed: u64 = rng.random();
                    let uplink = rng.random::<f64>() < cfg.uplink_fraction;
                    let (features, cause) = if corrupt {
                        (corruptor.apply_weather(&clean, weather.as_str(), cfg.severity, noise_seed)?, Some(weather.as_str().to_string()))
                    } else {
                        (clean, None)
                    };
                    raw.push((
                        Event {
                            index: 0,
                            timestamp,
                            window: cfg.window_of(timestamp),
                            device_id: device_id(loc, d),
                            location: loc.clone(),
                            weather,
                            features,
                            uplink,
                        },
                        GroundTruth { label, cause },
                    ));
                }
            }
        }
    }
    // stable sort keeps generation order among exact ties
    raw.sort_by(|a, b| a.0.timestamp.cmp(&b.0.timestamp).then_with(|| a.0.device_id.cmp(&b.0.device_id)));
    let mut events = Vec::with_capacity(raw.len());
    let mut truth = Vec::with_capacity(raw.len());
    for (i, (mut e, t)) in raw.into_iter().enumerate() {
        e.index = i;
        events.push(e);
        truth.push(t);
    }
    Ok(Stream { events, labels: SealedLabels { truth } })
}
