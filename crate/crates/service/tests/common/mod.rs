#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use driftwatch_core::driftlog::example_log;
use driftwatch_core::model::{train_clean, Corruptor, SyntheticTask, TaskConfig};
use driftwatch_service::{MonitorService, NoWeather, OperatingMode, RawEntry, RawSample, ServiceConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DAY0: i64 = 1_577_836_800;
pub const DAY: i64 = 86_400;

pub struct Fixture {
    pub task: SyntheticTask,
    pub model: driftwatch_core::model::ToyClassifier,
    pub corruptor: Corruptor,
}

pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let task = SyntheticTask::generate(&TaskConfig::default(), 7).unwrap();
        let model = train_clean(&task, 7).unwrap();
        let corruptor = Corruptor::new(&task, 7);
        Fixture { task, model, corruptor }
    })
}

pub fn config(mode: OperatingMode) -> ServiceConfig {
    ServiceConfig { mode, window_origin: DAY0, window_seconds: DAY, ..ServiceConfig::default() }
}

pub fn service(mode: OperatingMode) -> MonitorService {
    MonitorService::new(config(mode), fixture().model.clone(), Arc::new(NoWeather)).unwrap()
}

pub fn entry(ts: i64, device: &str, location: &str, weather: &str, drift: bool) -> RawEntry {
    RawEntry {
        timestamp: ts,
        device_id: device.into(),
        model_version_id: "clean".into(),
        location: location.into(),
        drift,
        attributes: [("weather".to_string(), weather.to_string())].into(),
    }
}

/// The five-row example log as device reports.
pub fn example_entries() -> Vec<RawEntry> {
    example_log()
        .into_iter()
        .map(|e| entry(e.timestamp, &e.device_id, &e.attributes["location"], &e.attributes["weather"], e.drift))
        .collect()
}

/// `n` uplinked inputs under `weather` (corrupted at severity 3 unless
/// clear), spread over the first hours of `window`.
pub fn samples(window: u64, location: &str, weather: &str, n: usize, seed: u64) -> Vec<RawSample> {
    let f = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (xs, _) = f.task.sample(n, &mut rng);
    xs.into_iter()
        .enumerate()
        .map(|(i, x)| {
            let features = f.corruptor.apply_weather(&x, weather, 3, seed.wrapping_add(i as u64)).unwrap();
            RawSample {
                timestamp: DAY0 + window as i64 * DAY + i as i64,
                device_id: format!("dev-{location}-{i}"),
                location: location.into(),
                features,
                attributes: [("weather".to_string(), weather.to_string())].into(),
            }
        })
        .collect()
}

/// Entries for one window: every `(location, weather, total, drifted)`
/// group gets its own devices, one entry each.
pub fn window_entries(window: u64, groups: &[(&str, &str, usize, usize)]) -> Vec<RawEntry> {
    let mut out = Vec::new();
    let mut t = DAY0 + window as i64 * DAY;
    for (g, &(location, weather, total, drifted)) in groups.iter().enumerate() {
        for i in 0..total {
            out.push(entry(t, &format!("g{g}-d{i}"), location, weather, i < drifted));
            t += 1;
        }
    }
    out
}

pub fn ingest(svc: &MonitorService, entries: Vec<RawEntry>, samples: Vec<RawSample>) {
    for e in entries {
        svc.ingest_entry(e).unwrap();
    }
    for s in samples {
        svc.ingest_sample(s).unwrap();
    }
}
