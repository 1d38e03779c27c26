//! Synthetic drift-log fixtures with planted causes, used by the acceptance
//! target.
//!
//! Every entry carries `weather`, `location` and `device_id`. Entries whose
//! weather is planted are flagged with probability `tpr`, all others with
//! probability `fpr`, which stands in for a detector with those rates.

use std::collections::BTreeMap;

use driftwatch_core::driftlog::{DriftLogEntry, LogWindow};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WEATHERS: [&str; 4] = ["clear-day", "rain", "snow", "fog"];
pub const DRIFT_WEATHERS: [&str; 3] = ["rain", "snow", "fog"];

#[derive(Debug, Clone)]
pub struct PlantedConfig {
    pub entries: usize,
    pub locations: usize,
    pub devices_per_location: usize,
    pub tpr: f64,
    pub fpr: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self { entries: 3000, locations: 6, devices_per_location: 4, tpr: 0.7, fpr: 0.05 }
    }
}

/// A window and, per entry, the planted weather it was drawn under (`None`
/// when its weather is not planted).
pub struct PlantedWindow {
    pub window: LogWindow,
    pub truth: Vec<Option<String>>,
}

/// All subsets of the drifting weathers: none, each single, each pair, all.
pub fn scenarios() -> Vec<Vec<&'static str>> {
    (0u32..8)
        .map(|mask| DRIFT_WEATHERS.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, w)| *w).collect())
        .collect()
}

pub fn planted_window(cfg: &PlantedConfig, planted: &[&str], seed: u64) -> PlantedWindow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(cfg.entries);
    let mut truth = Vec::with_capacity(cfg.entries);
    for i in 0..cfg.entries {
        let weather = WEATHERS[rng.random_range(0..WEATHERS.len())];
        let loc = rng.random_range(0..cfg.locations);
        let device = format!("dev-{loc}-{}", rng.random_range(0..cfg.devices_per_location));
        let is_planted = planted.contains(&weather);
        let drift = rng.random::<f64>() < if is_planted { cfg.tpr } else { cfg.fpr };
        entries.push(DriftLogEntry {
            timestamp: i as i64,
            device_id: device.clone(),
            model_version_id: "clean".into(),
            attributes: BTreeMap::from([
                ("weather".to_string(), weather.to_string()),
                ("location".to_string(), format!("loc-{loc}")),
                ("device_id".to_string(), device),
            ]),
            drift,
        });
        truth.push(is_planted.then(|| weather.to_string()));
    }
    PlantedWindow { window: LogWindow { start: 0, end: cfg.entries as i64, entries }, truth }
}
