//! Daily weather per location, generated from a seeded seasonal Markov chain
//! or loaded from a `date,location,weather` CSV file.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WeatherError {
    #[error("invalid schedule: {0}")]
    Config(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Weather {
    #[serde(rename = "clear-day")]
    ClearDay,
    #[serde(rename = "rain")]
    Rain,
    #[serde(rename = "snow")]
    Snow,
    #[serde(rename = "fog")]
    Fog,
}

impl Weather {
    pub const ALL: [Weather; 4] = [Weather::ClearDay, Weather::Rain, Weather::Snow, Weather::Fog];

    pub fn as_str(self) -> &'static str {
        match self {
            Weather::ClearDay => "clear-day",
            Weather::Rain => "rain",
            Weather::Snow => "snow",
            Weather::Fog => "fog",
        }
    }

    pub fn is_drift(self) -> bool {
        self != Weather::ClearDay
    }
}

impl fmt::Display for Weather {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Weather {
    type Err = WeatherError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Weather::ALL
            .into_iter()
            .find(|w| w.as_str() == s)
            .ok_or_else(|| WeatherError::Config(format!("unknown weather label {s:?}")))
    }
}

pub const SECONDS_PER_DAY: i64 = 86_400;

pub fn epoch_seconds(date: NaiveDate) -> i64 {
    date.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc().timestamp()
}

/// Weather for every `(location, day)` over a contiguous day range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherSchedule {
    pub start: NaiveDate,
    pub days: usize,
    /// `location → one label per day`.
    pub table: BTreeMap<String, Vec<Weather>>,
}

/// Climate of a location: relative weight of each drifting weather in the
/// cold and warm halves of the range.
#[derive(Debug, Clone, Copy)]
struct Climate {
    rain: f64,
    snow: f64,
    fog: f64,
}

fn climate_for(location: &str, index: usize) -> Climate {
    match location {
        "New York" => Climate { rain: 1.0, snow: 0.8, fog: 0.4 },
        "Tibet" => Climate { rain: 0.3, snow: 1.4, fog: 0.5 },
        "Beijing" => Climate { rain: 0.5, snow: 0.6, fog: 1.1 },
        "New South Wales" => Climate { rain: 1.4, snow: 0.1, fog: 0.6 },
        "United Kingdom" => Climate { rain: 1.3, snow: 0.3, fog: 0.9 },
        "Quebec" => Climate { rain: 0.5, snow: 1.5, fog: 0.4 },
        _ => {
            // unnamed locations get a rotating climate
            let w = [0.6, 1.0, 1.3][index % 3];
            Climate { rain: w, snow: 1.6 - w, fog: 0.4 + 0.2 * (index % 2) as f64 }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    /// Target long-run fraction of days with drifting weather.
    pub drift_fraction: f64,
    /// Probability that a day repeats the previous day's weather.
    pub persistence: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { drift_fraction: 0.3, persistence: 0.55 }
    }
}

impl WeatherSchedule {
    /// Each location follows a two-state-memory chain: with probability
    /// `persistence` a day repeats yesterday, otherwise it is drawn fresh from
    /// a seasonal distribution (snow fades and rain grows over the range). The
    /// fresh-draw distribution is the chain's stationary law, so about
    /// `drift_fraction` of days drift.
    pub fn generate(
        locations: &[String],
        start: NaiveDate,
        days: usize,
        params: &ScheduleParams,
        seed: u64,
    ) -> Result<Self, WeatherError> {
        if !(0.0..=1.0).contains(&params.drift_fraction) || !(0.0..1.0).contains(&params.persistence) {
            return Err(WeatherError::Config("drift_fraction must be in [0,1] and persistence in [0,1)".into()));
        }
        if locations.is_empty() || days == 0 {
            return Err(WeatherError::Config("schedule needs at least one location and one day".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = BTreeMap::new();
        for (li, loc) in locations.iter().enumerate() {
            let c = climate_for(loc, li);
            let mut labels = Vec::with_capacity(days);
            let mut today = Weather::ClearDay;
            for day in 0..days {
                let date = start + chrono::Days::new(day as u64);
                // 0 in deep winter, 1 by late spring
                let warm = ((date.ordinal0() as f64) / 120.0).min(1.0);
                let fresh = |rng: &mut ChaCha8Rng| {
                    if rng.random::<f64>() >= params.drift_fraction {
                        return Weather::ClearDay;
                    }
                    let rain = c.rain * (0.5 + warm);
                    let snow = c.snow * (1.5 - warm);
                    let fog = c.fog;
                    let u = rng.random::<f64>() * (rain + snow + fog);
                    if u < rain {
                        Weather::Rain
                    } else if u < rain + snow {
                        Weather::Snow
                    } else {
                        Weather::Fog
                    }
                };
                today = if day > 0 && rng.random::<f64>() < params.persistence { today } else { fresh(&mut rng) };
                labels.push(today);
            }
            table.insert(loc.clone(), labels);
        }
        Ok(Self { start, days, table })
    }

    pub fn start_seconds(&self) -> i64 {
        epoch_seconds(self.start)
    }

    pub fn end_seconds(&self) -> i64 {
        self.start_seconds() + self.days as i64 * SECONDS_PER_DAY
    }

    pub fn locations(&self) -> impl Iterator<Item = &str> {
        self.table.keys().map(String::as_str)
    }

    pub fn on_day(&self, location: &str, day: usize) -> Option<Weather> {
        self.table.get(location)?.get(day).copied()
    }

    /// Weather at an epoch-seconds timestamp; `None` for unknown locations
    /// or times outside the range.
    pub fn lookup(&self, location: &str, timestamp: i64) -> Option<Weather> {
        let offset = timestamp - self.start_seconds();
        if offset < 0 {
            return None;
        }
        self.on_day(location, (offset / SECONDS_PER_DAY) as usize)
    }

    /// Fraction of `(location, day)` cells with drifting weather.
    pub fn drift_fraction(&self) -> f64 {
        let cells: usize = self.table.values().map(Vec::len).sum();
        let drifted = self.table.values().flatten().filter(|w| w.is_drift()).count();
        drifted as f64 / cells.max(1) as f64
    }

    /// Errors unless every location in `locations` has a label for every day.
    pub fn check_coverage(&self, locations: &[String]) -> Result<(), WeatherError> {
        for loc in locations {
            match self.table.get(loc) {
                Some(days) if days.len() == self.days => {}
                Some(days) => {
                    return Err(WeatherError::Config(format!(
                        "location {loc:?} has {} of {} days",
                        days.len(),
                        self.days
                    )))
                }
                None => return Err(WeatherError::Config(format!("location {loc:?} missing from schedule"))),
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), WeatherError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["date", "location", "weather"])?;
        for day in 0..self.days {
            let date = (self.start + chrono::Days::new(day as u64)).format("%Y-%m-%d").to_string();
            for (loc, labels) in &self.table {
                out.write_record([date.as_str(), loc.as_str(), labels[day].as_str()])?;
            }
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads `date,location,weather` rows. Dates must form a gap-free range
    /// and every location must cover all of it.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, WeatherError> {
        #[derive(Deserialize)]
        struct Row {
            date: NaiveDate,
            location: String,
            weather: Weather,
        }
        let mut rows = Vec::new();
        for row in csv::Reader::from_reader(r).deserialize::<Row>() {
            rows.push(row?);
        }
        let start = rows
            .iter()
            .map(|r| r.date)
            .min()
            .ok_or_else(|| WeatherError::Config("empty schedule".into()))?;
        let end = rows.iter().map(|r| r.date).max().expect("non-empty");
        let days = (end - start).num_days() as usize + 1;
        let mut cells: BTreeMap<String, Vec<Option<Weather>>> = BTreeMap::new();
        for r in rows {
            let day = (r.date - start).num_days() as usize;
            let slot = &mut cells.entry(r.location.clone()).or_insert_with(|| vec![None; days])[day];
            if slot.replace(r.weather).is_some() {
                return Err(WeatherError::Config(format!("duplicate row for {} on {}", r.location, r.date)));
            }
        }
        let mut table = BTreeMap::new();
        for (loc, labels) in cells {
            let full: Option<Vec<Weather>> = labels.into_iter().collect();
            let full = full.ok_or_else(|| WeatherError::Config(format!("location {loc:?} has missing days")))?;
            table.insert(loc, full);
        }
        Ok(Self { start, days, table })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn locs() -> Vec<String> {
        ["New York", "Tibet", "Beijing", "New South Wales", "United Kingdom", "Quebec", "Location-7"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn start() -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 1, 1).unwrap()
    }

    #[test]
    fn generation_is_deterministic_and_near_target() {
        let a = WeatherSchedule::generate(&locs(), start(), 111, &ScheduleParams::default(), 1).unwrap();
        let b = WeatherSchedule::generate(&locs(), start(), 111, &ScheduleParams::default(), 1).unwrap();
        assert_eq!(a, b);
        let f = a.drift_fraction();
        assert!((0.2..=0.4).contains(&f), "drift fraction {f}");
        for w in [Weather::Rain, Weather::Snow, Weather::Fog] {
            assert!(a.table.values().flatten().any(|x| *x == w));
        }
        a.check_coverage(&locs()).unwrap();
        assert!(a.check_coverage(&["Mars".to_string()]).is_err());
    }

    #[test]
    fn lookup_by_timestamp() {
        let s = WeatherSchedule::generate(&locs(), start(), 3, &ScheduleParams::default(), 4).unwrap();
        let t0 = epoch_seconds(start());
        assert_eq!(t0, 1_577_836_800);
        assert_eq!(s.lookup("Tibet", t0 + SECONDS_PER_DAY + 5), s.on_day("Tibet", 1));
        assert_eq!(s.lookup("Tibet", t0 - 1), None);
        assert_eq!(s.lookup("Tibet", s.end_seconds()), None);
        assert_eq!(s.lookup("Atlantis", t0), None);
    }

    #[test]
    fn csv_round_trip() {
        let s = WeatherSchedule::generate(&locs(), start(), 20, &ScheduleParams::default(), 9).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let back = WeatherSchedule::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, s);
        let gap = "date,location,weather\n2020-01-01,A,rain\n2020-01-03,A,snow\n";
        assert!(WeatherSchedule::read_csv(gap.as_bytes()).is_err());
        let bad = "date,location,weather\n2020-01-01,A,hail\n";
        assert!(WeatherSchedule::read_csv(bad.as_bytes()).is_err());
    }
}
