//! Append-only drift log with windowed queries and durable persistence.
//!
//! On disk the log is newline-delimited JSON. The first line is a header
//! naming the format and the attribute schema; every following line is one
//! [`DriftLogEntry`]. Records are never rewritten. A trailing line without a
//! newline (a torn write) is discarded on reopen.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::itemset::Itemset;

pub const LOG_FORMAT: &str = "driftlog/v1";

#[derive(Debug, Error)]
pub enum LogError {
    #[error("schema violation on field `{field}`: {reason}")]
    Schema { field: String, reason: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("log file is corrupt at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Attribute names every entry must carry, fixed when the store is opened.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    attributes: Vec<String>,
}

impl Schema {
    pub fn new<I, S>(attributes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut attributes: Vec<String> = attributes.into_iter().map(Into::into).collect();
        attributes.sort();
        attributes.dedup();
        Self { attributes }
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn contains(&self, attribute: &str) -> bool {
        self.attributes.binary_search_by(|a| a.as_str().cmp(attribute)).is_ok()
    }

    pub fn validate(&self, entry: &DriftLogEntry) -> Result<(), LogError> {
        if entry.device_id.is_empty() {
            return Err(LogError::Schema {
                field: "device_id".into(),
                reason: "must be non-empty".into(),
            });
        }
        for name in &self.attributes {
            match entry.attributes.get(name) {
                None => {
                    return Err(LogError::Schema {
                        field: name.clone(),
                        reason: "missing attribute".into(),
                    })
                }
                Some(v) if v.is_empty() => {
                    return Err(LogError::Schema {
                        field: name.clone(),
                        reason: "empty value".into(),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = entry.attributes.keys().find(|k| !self.contains(k)) {
            return Err(LogError::Schema {
                field: extra.clone(),
                reason: "attribute not declared in schema".into(),
            });
        }
        Ok(())
    }

    pub fn validate_itemset(&self, itemset: &Itemset) -> Result<(), LogError> {
        match itemset.attributes().find(|a| !self.contains(a)) {
            Some(a) => Err(LogError::Schema {
                field: a.to_string(),
                reason: "attribute not declared in schema".into(),
            }),
            None => Ok(()),
        }
    }
}

/// Metadata of one inference as reported by a device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriftLogEntry {
    /// Epoch seconds.
    pub timestamp: i64,
    pub device_id: String,
    pub model_version_id: String,
    pub attributes: BTreeMap<String, String>,
    pub drift: bool,
}

impl DriftLogEntry {
    pub fn matches(&self, itemset: &Itemset) -> bool {
        itemset.matches(&self.attributes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftFilter {
    Any,
    Drifted,
    Clean,
}

impl DriftFilter {
    fn accepts(self, drift: bool) -> bool {
        match self {
            DriftFilter::Any => true,
            DriftFilter::Drifted => drift,
            DriftFilter::Clean => !drift,
        }
    }
}

/// Entries whose timestamps fall in `[start, end)`, in insertion order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogWindow {
    pub start: i64,
    pub end: i64,
    pub entries: Vec<DriftLogEntry>,
}

impl LogWindow {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, itemset: &Itemset, filter: DriftFilter) -> usize {
        count_entries(&self.entries, itemset, filter)
    }

    pub fn working_copy(&self) -> WorkingCopy {
        WorkingCopy {
            window: self.clone(),
        }
    }
}

fn count_entries(entries: &[DriftLogEntry], itemset: &Itemset, filter: DriftFilter) -> usize {
    entries
        .iter()
        .filter(|e| filter.accepts(e.drift) && e.matches(itemset))
        .count()
}

/// Counts entries of `window` containing `itemset` with the given drift flag.
pub fn count(window: &LogWindow, itemset: &Itemset, filter: DriftFilter) -> usize {
    window.count(itemset, filter)
}

/// A private clone of a window whose drift flags may be cleared.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingCopy {
    window: LogWindow,
}

impl WorkingCopy {
    /// Clears the drift flag on every entry containing `itemset`; returns how
    /// many flags changed.
    pub fn mark_no_drift(&mut self, itemset: &Itemset) -> usize {
        let mut changed = 0;
        for e in self.window.entries.iter_mut().filter(|e| e.drift) {
            if e.matches(itemset) {
                e.drift = false;
                changed += 1;
            }
        }
        changed
    }

    pub fn count(&self, itemset: &Itemset, filter: DriftFilter) -> usize {
        self.window.count(itemset, filter)
    }

    pub fn window(&self) -> &LogWindow {
        &self.window
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    schema: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: u64,
    #[serde(flatten)]
    entry: DriftLogEntry,
}

/// The drift log. Optionally backed by a file that every append reaches
/// before the call returns.
#[derive(Debug)]
pub struct DriftLogStore {
    schema: Schema,
    entries: Vec<DriftLogEntry>,
    last_seen: HashMap<String, i64>,
    sink: Option<(PathBuf, BufWriter<File>)>,
}

impl DriftLogStore {
    pub fn in_memory(schema: Schema) -> Self {
        Self {
            schema,
            entries: Vec::new(),
            last_seen: HashMap::new(),
            sink: None,
        }
    }

    /// Opens (or creates) a file-backed log. Reopening with a different
    /// schema is rejected.
    pub fn open(path: impl AsRef<Path>, schema: Schema) -> Result<Self, LogError> {
        let path = path.as_ref().to_path_buf();
        let mut store = Self::in_memory(schema);
        let exists = path.exists() && std::fs::metadata(&path)?.len() > 0;
        if exists {
            let valid_len = store.replay(&path)?;
            // drop any torn tail so new records start on a fresh line
            let file = OpenOptions::new().write(true).open(&path)?;
            file.set_len(valid_len)?;
        } else {
            let mut f = File::create(&path)?;
            let header = Header {
                format: LOG_FORMAT.into(),
                schema: store.schema.attributes.clone(),
            };
            writeln!(f, "{}", serde_json::to_string(&header).expect("header serializes"))?;
            f.sync_all()?;
        }
        let file = OpenOptions::new().append(true).open(&path)?;
        store.sink = Some((path, BufWriter::new(file)));
        Ok(store)
    }

    fn replay(&mut self, path: &Path) -> Result<u64, LogError> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut line = String::new();
        let mut offset = 0u64;
        let mut lineno = 0usize;
        loop {
            line.clear();
            let n = reader.read_line(&mut line)?;
            if n == 0 {
                break;
            }
            lineno += 1;
            if !line.ends_with('\n') {
                break;
            }
            let text = line.trim_end();
            if lineno == 1 {
                let header: Header = serde_json::from_str(text).map_err(|e| LogError::Corrupt {
                    line: 1,
                    reason: format!("bad header: {e}"),
                })?;
                if header.format != LOG_FORMAT {
                    return Err(LogError::Corrupt {
                        line: 1,
                        reason: format!("unsupported format {}", header.format),
                    });
                }
                if Schema::new(header.schema) != self.schema {
                    return Err(LogError::Schema {
                        field: "schema".into(),
                        reason: "stored schema differs from configured schema".into(),
                    });
                }
            } else {
                let record: Record = serde_json::from_str(text).map_err(|e| LogError::Corrupt {
                    line: lineno,
                    reason: e.to_string(),
                })?;
                if record.id != self.entries.len() as u64 {
                    return Err(LogError::Corrupt {
                        line: lineno,
                        reason: format!("expected id {}, found {}", self.entries.len(), record.id),
                    });
                }
                self.accept(record.entry)?;
            }
            offset += n as u64;
        }
        if lineno == 0 {
            return Err(LogError::Corrupt {
                line: 1,
                reason: "missing header".into(),
            });
        }
        Ok(offset)
    }

    fn accept(&mut self, entry: DriftLogEntry) -> Result<u64, LogError> {
        self.schema.validate(&entry)?;
        if let Some(&last) = self.last_seen.get(&entry.device_id) {
            if entry.timestamp < last {
                return Err(LogError::Schema {
                    field: "timestamp".into(),
                    reason: format!(
                        "timestamp {} precedes {} already logged for device {}",
                        entry.timestamp, last, entry.device_id
                    ),
                });
            }
        }
        self.last_seen.insert(entry.device_id.clone(), entry.timestamp);
        self.entries.push(entry);
        Ok(self.entries.len() as u64 - 1)
    }

    /// Validates and appends one entry, returning its id.
    pub fn append(&mut self, entry: DriftLogEntry) -> Result<u64, LogError> {
        let record_line = self.sink.as_ref().map(|_| {
            serde_json::to_string(&Record {
                id: self.entries.len() as u64,
                entry: entry.clone(),
            })
            .expect("entry serializes")
        });
        let id = self.accept(entry)?;
        if let (Some((_, w)), Some(line)) = (self.sink.as_mut(), record_line) {
            let written = writeln!(w, "{line}").and_then(|_| w.flush());
            if let Err(e) = written {
                // keep memory consistent with disk
                let e2 = self.entries.pop().expect("just pushed");
                self.last_seen.remove(&e2.device_id);
                self.rebuild_last_seen_for(&e2.device_id);
                return Err(e.into());
            }
        }
        Ok(id)
    }

    fn rebuild_last_seen_for(&mut self, device: &str) {
        if let Some(ts) = self.entries.iter().rev().find(|e| e.device_id == device).map(|e| e.timestamp) {
            self.last_seen.insert(device.to_string(), ts);
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[DriftLogEntry] {
        &self.entries
    }

    pub fn path(&self) -> Option<&Path> {
        self.sink.as_ref().map(|(p, _)| p.as_path())
    }

    pub fn window(&self, start: i64, end: i64) -> Result<LogWindow, LogError> {
        if start >= end {
            return Err(LogError::InvalidInput(format!(
                "window start {start} must precede end {end}"
            )));
        }
        Ok(LogWindow {
            start,
            end,
            entries: self
                .entries
                .iter()
                .filter(|e| e.timestamp >= start && e.timestamp < end)
                .cloned()
                .collect(),
        })
    }

    /// Number of entries in `[start, end)` matching `itemset` and `filter`,
    /// without materializing the window.
    pub fn count_range(&self, start: i64, end: i64, itemset: &Itemset, filter: DriftFilter) -> usize {
        self.entries
            .iter()
            .filter(|e| e.timestamp >= start && e.timestamp < end)
            .filter(|e| filter.accepts(e.drift) && e.matches(itemset))
            .count()
    }
}

/// The five-row example log: two devices in New York and Helsinki, with snow
/// as the underlying drift and one false positive on a clear day.
pub fn example_log() -> Vec<DriftLogEntry> {
    const DAY0: i64 = 1_577_836_800; // 2020-01-01T00:00:00Z
    let row = |h: i64, m: i64, s: i64, device: &str, weather: &str, location: &str, drift: bool| {
        DriftLogEntry {
            timestamp: DAY0 + h * 3600 + m * 60 + s,
            device_id: device.into(),
            model_version_id: "clean".into(),
            attributes: BTreeMap::from([
                ("weather".to_string(), weather.to_string()),
                ("location".to_string(), location.to_string()),
                ("device_id".to_string(), device.to_string()),
            ]),
            drift,
        }
    };
    vec![
        row(6, 2, 1, "android_42", "clear-day", "Helsinki", false),
        row(6, 2, 23, "android_21", "clear-day", "New York", false),
        row(6, 4, 55, "android_21", "clear-day", "New York", true),
        row(8, 3, 32, "android_21", "snow", "New York", true),
        row(11, 5, 1, "android_42", "snow", "Helsinki", true),
    ]
}

pub fn example_schema() -> Schema {
    Schema::new(["weather", "location", "device_id"])
}
