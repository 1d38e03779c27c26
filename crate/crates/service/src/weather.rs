//! Weather enrichment for ingested entries.

use driftwatch_core::weather::WeatherSchedule;

/// Label used when the provider has no answer for a location or time.
pub const UNKNOWN_WEATHER: &str = "unknown";

/// Looks up the weather at a location and time. Stand-in for a third-party
/// weather API.
pub trait WeatherProvider: Send + Sync {
    fn lookup(&self, location: &str, timestamp: i64) -> Option<String>;
}

/// Provider backed by a day-resolution schedule.
#[derive(Debug, Clone)]
pub struct ScheduleWeather {
    schedule: WeatherSchedule,
}

impl ScheduleWeather {
    pub fn new(schedule: WeatherSchedule) -> Self {
        Self { schedule }
    }

    pub fn schedule(&self) -> &WeatherSchedule {
        &self.schedule
    }
}

impl WeatherProvider for ScheduleWeather {
    fn lookup(&self, location: &str, timestamp: i64) -> Option<String> {
        self.schedule.lookup(location, timestamp).map(|w| w.as_str().to_string())
    }
}

/// Provider that knows nothing; every entry is enriched as `unknown`.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoWeather;

impl WeatherProvider for NoWeather {
    fn lookup(&self, _location: &str, _timestamp: i64) -> Option<String> {
        None
    }
}
