//! Simulation configuration.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use driftwatch_core::adapt::AdaptConfig;
use driftwatch_core::model::{TaskConfig, MAX_SEVERITY, WEATHER_CAUSES};
use driftwatch_core::pool::PoolConfig;
use driftwatch_core::rca::{AnalysisMode, Thresholds};
use driftwatch_core::weather::{ScheduleParams, WeatherSchedule, SECONDS_PER_DAY};
use serde::{Deserialize, Serialize};

use crate::SimError;

/// The bundled schedule: 2020-01-01 for 111 days over the default locations.
pub const BUNDLED_SCHEDULE: &str = include_str!("../data/weather_2020.csv");
/// Seed the bundled schedule was generated with.
pub const BUNDLED_SCHEDULE_SEED: u64 = 2020;

pub const NAMED_LOCATIONS: [&str; 6] =
    ["New York", "Tibet", "Beijing", "New South Wales", "United Kingdom", "Quebec"];

/// Location names: the six named ones, then `Location-7`, `Location-8`, ...
pub fn default_locations(count: usize) -> Vec<String> {
    (0..count)
        .map(|i| match NAMED_LOCATIONS.get(i) {
            Some(name) => name.to_string(),
            None => format!("Location-{}", i + 1),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum WeatherSource {
    /// The schedule shipped with the crate.
    Bundled,
    /// A `date,location,weather` CSV file.
    File { path: PathBuf },
    /// Generated from a seasonal Markov chain.
    Generated {
        #[serde(default)]
        params: ScheduleParams,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub locations: Vec<String>,
    /// Optional explicit class distribution per location; locations not
    /// listed use a Zipf(`zipf_alpha`) law over a per-location class order.
    pub class_distributions: std::collections::BTreeMap<String, Vec<f64>>,
    pub devices_per_location: usize,
    /// Poisson mean of requests per device per day.
    pub arrivals_per_day: f64,
    pub windows: usize,
    pub start: NaiveDate,
    pub days: usize,
    /// Corruption severity, 1..=5.
    pub severity: u8,
    /// Probability an input taken under a drifting weather is corrupted.
    pub drift_probability: f64,
    pub zipf_alpha: f64,
    /// Fraction of inputs devices uplink for adaptation.
    pub uplink_fraction: f64,
    pub seed: u64,
    /// Weathers that corrupt inputs.
    pub causes: Vec<String>,
    pub weather: WeatherSource,
    pub task: TaskConfig,
    /// Seed of the task geometry, the clean training run and corruption
    /// directions. Kept apart from `seed` so runs share one model.
    pub model_seed: u64,
    pub msp_threshold: f64,
    pub analysis_mode: AnalysisMode,
    pub thresholds: Thresholds,
    pub pool: PoolConfig,
    pub adapt: AdaptConfig,
    pub sample_retention_windows: u64,
    pub adapt_clean: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            locations: default_locations(7),
            class_distributions: Default::default(),
            devices_per_location: 16,
            arrivals_per_day: 2.0,
            windows: 8,
            start: NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date"),
            days: 111,
            severity: 3,
            drift_probability: 1.0,
            zipf_alpha: 0.0,
            uplink_fraction: 0.1,
            seed: 0,
            causes: WEATHER_CAUSES.iter().map(|s| s.to_string()).collect(),
            weather: WeatherSource::Bundled,
            task: TaskConfig::default(),
            model_seed: 7,
            msp_threshold: driftwatch_core::detect::DEFAULT_MSP_THRESHOLD,
            analysis_mode: AnalysisMode::Full,
            thresholds: Thresholds::default(),
            pool: PoolConfig::default(),
            adapt: AdaptConfig::default(),
            sample_retention_windows: 2,
            adapt_clean: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.locations.is_empty() || self.devices_per_location == 0 {
            return bad("need at least one location and one device per location".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &self.locations {
            if l.is_empty() || !seen.insert(l) {
                return bad(format!("location names must be non-empty and unique, got {l:?}"));
            }
        }
        if !(self.arrivals_per_day > 0.0 && self.arrivals_per_day.is_finite()) {
            return bad(format!("arrivals_per_day must be positive, got {}", self.arrivals_per_day));
        }
        if self.windows == 0 || self.days == 0 || self.windows as i64 > self.days as i64 * SECONDS_PER_DAY {
            return bad("windows and days must be positive".into());
        }
        if self.severity == 0 || self.severity > MAX_SEVERITY {
            return bad(format!("severity must be in 1..={MAX_SEVERITY}, got {}", self.severity));
        }
        for (name, p) in [("drift_probability", self.drift_probability), ("uplink_fraction", self.uplink_fraction)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if !(self.zipf_alpha >= 0.0 && self.zipf_alpha.is_finite()) {
            return bad(format!("zipf_alpha must be non-negative, got {}", self.zipf_alpha));
        }
        for c in &self.causes {
            if !WEATHER_CAUSES.contains(&c.as_str()) {
                return bad(format!("unknown cause {c:?}; expected one of {WEATHER_CAUSES:?}"));
            }
        }
        for (loc, probs) in &self.class_distributions {
            if !self.locations.contains(loc) {
                return bad(format!("class distribution for unknown location {loc:?}"));
            }
            let total: f64 = probs.iter().sum();
            if probs.len() != self.task.num_classes || probs.iter().any(|p| *p < 0.0) || !(total > 0.0) {
                return bad(format!("class distribution for {loc:?} must have {} non-negative weights", self.task.num_classes));
            }
        }
        if !(self.msp_threshold > 0.0 && self.msp_threshold < 1.0) {
            return bad(format!("msp_threshold must be in (0, 1), got {}", self.msp_threshold));
        }
        self.thresholds.validate().map_err(|e| SimError::Config(e.to_string()))?;
        self.pool.validate().map_err(|e| SimError::Config(e.to_string()))?;
        self.adapt.validate().map_err(|e| SimError::Config(e.to_string()))?;
        if self.sample_retention_windows == 0 {
            return bad("sample_retention_windows must be at least 1".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let cfg: Self = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn start_seconds(&self) -> i64 {
        driftwatch_core::weather::epoch_seconds(self.start)
    }

    pub fn end_seconds(&self) -> i64 {
        self.start_seconds() + self.days as i64 * SECONDS_PER_DAY
    }

    /// Window length in seconds; rounded up so every event lands in one of
    /// the configured windows.
    pub fn window_seconds(&self) -> i64 {
        let total = self.days as i64 * SECONDS_PER_DAY;
        (total + self.windows as i64 - 1) / self.windows as i64
    }

    pub fn window_of(&self, timestamp: i64) -> usize {
        (((timestamp - self.start_seconds()) / self.window_seconds()) as usize).min(self.windows - 1)
    }

    /// Loads the configured schedule and checks it covers every location
    /// over the whole range.
    pub fn schedule(&self) -> Result<WeatherSchedule, SimError> {
        let schedule = match &self.weather {
            WeatherSource::Bundled => WeatherSchedule::read_csv(BUNDLED_SCHEDULE.as_bytes())?,
            WeatherSource::File { path } => {
                let f = std::fs::File::open(path)
                    .map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
                WeatherSchedule::read_csv(f)?
            }
            WeatherSource::Generated { params, seed } => {
                WeatherSchedule::generate(&self.locations, self.start, self.days, params, *seed)?
            }
        };
        schedule.check_coverage(&self.locations)?;
        let covered = schedule.start <= self.start && schedule.end_seconds() >= self.end_seconds();
        if !covered {
            return Err(SimError::Config(format!(
                "schedule covers {} + {} days, simulation needs {} + {} days",
                schedule.start, schedule.days, self.start, self.days
            )));
        }
        Ok(schedule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let cfg = SimConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.locations.len(), 7);
        assert_eq!(cfg.locations[6], "Location-7");
        assert_eq!(cfg.window_seconds() * 8, 111 * SECONDS_PER_DAY);
        assert_eq!(cfg.window_of(cfg.start_seconds()), 0);
        assert_eq!(cfg.window_of(cfg.end_seconds() - 1), 7);
        cfg.schedule().unwrap();
    }

    #[test]
    fn bundled_schedule_is_the_generator_output() {
        let cfg = SimConfig::default();
        let generated = WeatherSchedule::generate(
            &cfg.locations,
            cfg.start,
            cfg.days,
            &ScheduleParams::default(),
            BUNDLED_SCHEDULE_SEED,
        )
        .unwrap();
        let mut csv = Vec::new();
        generated.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), BUNDLED_SCHEDULE);
        let f = generated.drift_fraction();
        assert!((0.2..=0.4).contains(&f), "drifted share of days {f}");
    }

    #[test]
    fn rejects_bad_configs() {
        let cases = [
            "severity = 0",
            "severity = 6",
            "uplink_fraction = 1.5",
            "windows = 0",
            "causes = [\"hail\"]",
            "locations = [\"A\", \"A\"]",
            "zipf_alpha = -1.0",
            "[class_distributions]\nAtlantis = [1.0]",
        ];
        for c in cases {
            assert!(SimConfig::from_toml(c).is_err(), "{c}");
        }
        let short = SimConfig { days: 400, ..SimConfig::default() };
        assert!(short.schedule().is_err(), "bundled schedule is too short");
        let stranger = SimConfig { locations: vec!["Atlantis".into()], ..SimConfig::default() };
        assert!(stranger.schedule().is_err());
    }

    #[test]
    fn parses_toml() {
        let cfg = SimConfig::from_toml(
            r#"
            seed = 3
            uplink_fraction = 0.01
            analysis_mode = "fim_only"
            [weather]
            source = "generated"
            seed = 9
            [pool]
            subsumption = "off"
            capacity = 100
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.analysis_mode, AnalysisMode::FimOnly);
        assert!(matches!(cfg.weather, WeatherSource::Generated { seed: 9, .. }));
        assert_eq!(cfg.pool.capacity, 100);
        cfg.schedule().unwrap();
    }
}
