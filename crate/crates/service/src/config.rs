//! Service configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use driftwatch_core::adapt::AdaptConfig;
use driftwatch_core::pool::PoolConfig;
use driftwatch_core::rca::{AnalysisMode, Thresholds};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatingMode {
    /// Analysis runs on every window close and adapts every cause it finds.
    #[default]
    Autopilot,
    /// Analysis and adaptation wait for operator triggers.
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    /// Address the HTTP API binds to.
    pub listen: String,
    /// Attributes every drift-log entry carries. `device_id`, `location` and
    /// `weather` are filled in by ingestion.
    pub schema: Vec<String>,
    pub mode: OperatingMode,
    pub analysis_mode: AnalysisMode,
    pub thresholds: Thresholds,
    pub pool: PoolConfig,
    pub adapt: AdaptConfig,
    /// Epoch seconds at which window 0 starts.
    pub window_origin: i64,
    pub window_seconds: i64,
    /// Sample buffers of this many windows (ending at the analyzed one) feed
    /// an adaptation round.
    pub sample_retention_windows: u64,
    /// Also adapt the clean model on samples no cause explains.
    pub adapt_clean: bool,
    /// Directory for the drift log, reports and audit events. In-memory
    /// when unset.
    pub data_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            schema: vec!["device_id".into(), "location".into(), "weather".into()],
            mode: OperatingMode::Autopilot,
            analysis_mode: AnalysisMode::Full,
            thresholds: Thresholds::default(),
            pool: PoolConfig::default(),
            adapt: AdaptConfig::default(),
            window_origin: 1_577_836_800,
            window_seconds: 86_400,
            sample_retention_windows: 2,
            adapt_clean: false,
            data_dir: None,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), ServiceError> {
        let bad = |m: String| Err(ServiceError::Config(m));
        if self.window_seconds <= 0 {
            return bad(format!("window_seconds must be positive, got {}", self.window_seconds));
        }
        if self.sample_retention_windows == 0 {
            return bad("sample_retention_windows must be at least 1".into());
        }
        for required in ["device_id", "location", "weather"] {
            if !self.schema.iter().any(|s| s == required) {
                return bad(format!("schema must include {required:?}"));
            }
        }
        self.thresholds.validate().map_err(|e| ServiceError::Config(e.to_string()))?;
        self.pool.validate().map_err(|e| ServiceError::Config(e.to_string()))?;
        self.adapt.validate().map_err(|e| ServiceError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Window containing `timestamp`, or `None` before the origin.
    pub fn window_of(&self, timestamp: i64) -> Option<u64> {
        if timestamp < self.window_origin {
            None
        } else {
            Some(((timestamp - self.window_origin) / self.window_seconds) as u64)
        }
    }

    /// Half-open `[start, end)` bounds of a window.
    pub fn window_bounds(&self, window_id: u64) -> (i64, i64) {
        let start = self.window_origin + window_id as i64 * self.window_seconds;
        (start, start + self.window_seconds)
    }
}
