//! Capacity-bounded pool of by-cause model versions and device-side model
//! selection.
//!
//! Each version holds adapted normalization parameters for one cause itemset;
//! the clean model (empty itemset) is pinned and never evicted. Inserting a
//! version applies, in order: exact-itemset replacement, subsumption, and
//! least-recently-updated eviction down to capacity.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::itemset::Itemset;
use crate::model::{AdapterParams, ModelError, ToyClassifier};
use crate::rca::RiskRatio;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid version: {0}")]
    InvalidVersion(String),
}

/// How an incoming cause interacts with versions whose cause is a strict
/// subset or superset of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsumptionMode {
    /// A broader cause (fewer attributes, more coverage) evicts narrower
    /// versions, and a narrower incoming cause is refused while a broader
    /// version exists.
    #[default]
    Coverage,
    /// The incoming cause evicts versions with fewer attributes, and is
    /// refused while a version with more attributes exists.
    AttributeWise,
    /// No subsumption; only exact replacement and capacity apply.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    /// Maximum number of by-cause versions, not counting the clean model.
    pub capacity: usize,
    pub subsumption: SubsumptionMode,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self { capacity: 4, subsumption: SubsumptionMode::Coverage }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<(), PoolError> {
        if self.capacity == 0 {
            return Err(PoolError::Config("capacity must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVersion {
    pub version_id: String,
    /// Empty for the clean model.
    pub cause: Itemset,
    pub params: AdapterParams,
    /// Identifier of the frozen linear head these parameters belong to.
    pub base_id: String,
    pub created_at: i64,
    pub last_updated: i64,
    pub risk_ratio_at_creation: RiskRatio,
    /// Version this one was adapted from.
    pub parent: Option<String>,
    /// What produced the version, e.g. an alert id or `autopilot`.
    pub origin: String,
}

impl ModelVersion {
    pub fn is_clean(&self) -> bool {
        self.cause.is_empty()
    }

    pub fn classifier(&self, base: &ToyClassifier) -> Result<ToyClassifier, ModelError> {
        base.with_params(self.params.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionReason {
    /// Same cause itemset as the incoming version.
    Replaced,
    /// Coverage absorbed by the incoming version.
    Subsumed,
    /// Least recently updated while over capacity.
    Capacity,
    /// The incoming version itself was not admitted.
    Refused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eviction {
    pub version: ModelVersion,
    pub reason: EvictionReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPool {
    config: PoolConfig,
    clean: ModelVersion,
    versions: Vec<ModelVersion>,
}

/// Row of the exported pool state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub version_id: String,
    pub cause: Itemset,
    pub last_updated: i64,
    pub risk_ratio: RiskRatio,
}

fn lru_order(a: &ModelVersion, b: &ModelVersion) -> Ordering {
    a.last_updated
        .cmp(&b.last_updated)
        .then_with(|| a.created_at.cmp(&b.created_at))
        .then_with(|| a.version_id.cmp(&b.version_id))
}

impl ModelPool {
    pub fn new(config: PoolConfig, clean: ModelVersion) -> Result<Self, PoolError> {
        config.validate()?;
        if !clean.is_clean() {
            return Err(PoolError::InvalidVersion("the pinned model must have an empty cause".into()));
        }
        Ok(Self { config, clean, versions: Vec::new() })
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    pub fn clean(&self) -> &ModelVersion {
        &self.clean
    }

    /// By-cause versions, excluding the clean model.
    pub fn versions(&self) -> &[ModelVersion] {
        &self.versions
    }

    /// Number of stored versions including the clean model.
    pub fn len(&self) -> usize {
        self.versions.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, version_id: &str) -> Option<&ModelVersion> {
        std::iter::once(&self.clean)
            .chain(&self.versions)
            .find(|v| v.version_id == version_id)
    }

    pub fn insert(&mut self, version: ModelVersion) -> Result<Vec<Eviction>, PoolError> {
        if !version.params.is_valid() {
            return Err(PoolError::InvalidVersion(format!("{} has invalid parameters", version.version_id)));
        }
        if version.is_clean() {
            let old = std::mem::replace(&mut self.clean, version);
            return Ok(vec![Eviction { version: old, reason: EvictionReason::Replaced }]);
        }
        if let Some(slot) = self.versions.iter_mut().find(|v| v.cause == version.cause) {
            let old = std::mem::replace(slot, version);
            return Ok(vec![Eviction { version: old, reason: EvictionReason::Replaced }]);
        }
        // `evicts(existing)` / `blocks(existing)` relative to the incoming cause
        let (evicts, blocks): (fn(&Itemset, &Itemset) -> bool, fn(&Itemset, &Itemset) -> bool) =
            match self.config.subsumption {
                SubsumptionMode::Coverage => (
                    |old, new| new.is_strict_subset_of(old),
                    |old, new| old.is_strict_subset_of(new),
                ),
                SubsumptionMode::AttributeWise => (
                    |old, new| old.is_strict_subset_of(new),
                    |old, new| new.is_strict_subset_of(old),
                ),
                SubsumptionMode::Off => (|_, _| false, |_, _| false),
            };
        if self.versions.iter().any(|v| blocks(&v.cause, &version.cause)) {
            return Ok(vec![Eviction { version, reason: EvictionReason::Refused }]);
        }
        let mut evicted = Vec::new();
        let mut kept = Vec::with_capacity(self.versions.len() + 1);
        for v in self.versions.drain(..) {
            if evicts(&v.cause, &version.cause) {
                evicted.push(Eviction { version: v, reason: EvictionReason::Subsumed });
            } else {
                kept.push(v);
            }
        }
        kept.push(version);
        self.versions = kept;
        while self.versions.len() > self.config.capacity {
            let (idx, _) = self
                .versions
                .iter()
                .enumerate()
                .min_by(|a, b| lru_order(a.1, b.1))
                .expect("non-empty");
            let v = self.versions.remove(idx);
            evicted.push(Eviction { version: v, reason: EvictionReason::Capacity });
        }
        Ok(evicted)
    }

    /// The version to run for an input with these attributes: the matching
    /// version with the most attributes, then the higher risk ratio, then the
    /// most recently updated; the clean model when nothing matches.
    pub fn select(&self, attributes: &BTreeMap<String, String>) -> &ModelVersion {
        self.versions
            .iter()
            .filter(|v| v.cause.matches(attributes))
            .max_by(|a, b| {
                a.cause
                    .len()
                    .cmp(&b.cause.len())
                    .then_with(|| a.risk_ratio_at_creation.rank_cmp(b.risk_ratio_at_creation))
                    .then_with(|| a.last_updated.cmp(&b.last_updated))
                    .then_with(|| b.version_id.cmp(&a.version_id))
            })
            .unwrap_or(&self.clean)
    }

    /// Pool state, most recently updated first, clean model last.
    pub fn export(&self) -> Vec<PoolEntry> {
        let mut vs: Vec<&ModelVersion> = self.versions.iter().collect();
        vs.sort_by(|a, b| lru_order(b, a));
        vs.into_iter()
            .chain(std::iter::once(&self.clean))
            .map(|v| PoolEntry {
                version_id: v.version_id.clone(),
                cause: v.cause.clone(),
                last_updated: v.last_updated,
                risk_ratio: v.risk_ratio_at_creation,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn version(id: &str, pairs: &[(&str, &str)], t: i64, rr: f64) -> ModelVersion {
        ModelVersion {
            version_id: id.into(),
            cause: Itemset::from_pairs(pairs.iter().copied()),
            params: AdapterParams::identity(2),
            base_id: "base".into(),
            created_at: t,
            last_updated: t,
            risk_ratio_at_creation: RiskRatio::Finite(rr),
            parent: None,
            origin: "test".into(),
        }
    }

    fn pool(capacity: usize) -> ModelPool {
        ModelPool::new(
            PoolConfig { capacity, ..PoolConfig::default() },
            version("clean", &[], 0, 1.0),
        )
        .unwrap()
    }

    fn ids(p: &ModelPool) -> Vec<&str> {
        p.versions().iter().map(|v| v.version_id.as_str()).collect()
    }

    #[test]
    fn exact_match_replaces() {
        let mut p = pool(4);
        p.insert(version("v1", &[("weather", "rain")], 1, 2.0)).unwrap();
        let ev = p.insert(version("v2", &[("weather", "rain")], 2, 2.5)).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].version.version_id, "v1");
        assert_eq!(ev[0].reason, EvictionReason::Replaced);
        assert_eq!(ids(&p), vec!["v2"]);
    }

    #[test]
    fn broader_cause_subsumes_narrower() {
        let mut p = pool(4);
        p.insert(version("v1", &[("weather", "snow"), ("location", "New York")], 1, 2.0)).unwrap();
        let ev = p.insert(version("v2", &[("weather", "snow")], 2, 3.0)).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].reason, EvictionReason::Subsumed);
        assert_eq!(ids(&p), vec!["v2"]);
        // and a narrower newcomer is refused while the broader one stays
        let ev = p.insert(version("v3", &[("weather", "snow"), ("location", "Tibet")], 3, 2.0)).unwrap();
        assert_eq!(ev[0].reason, EvictionReason::Refused);
        assert_eq!(ids(&p), vec!["v2"]);
    }

    #[test]
    fn attribute_wise_mode_reverses_direction() {
        let mut p = ModelPool::new(
            PoolConfig { capacity: 4, subsumption: SubsumptionMode::AttributeWise },
            version("clean", &[], 0, 1.0),
        )
        .unwrap();
        p.insert(version("v1", &[("weather", "snow")], 1, 3.0)).unwrap();
        let ev = p.insert(version("v2", &[("weather", "snow"), ("location", "New York")], 2, 2.0)).unwrap();
        assert_eq!(ev[0].reason, EvictionReason::Subsumed);
        assert_eq!(ids(&p), vec!["v2"]);
    }

    #[test]
    fn capacity_evicts_least_recently_updated() {
        let mut p = pool(2);
        p.insert(version("a", &[("x", "a")], 1, 2.0)).unwrap();
        p.insert(version("b", &[("x", "b")], 2, 2.0)).unwrap();
        let ev = p.insert(version("c", &[("x", "c")], 3, 2.0)).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].version.version_id, "a");
        assert_eq!(ev[0].reason, EvictionReason::Capacity);
        assert_eq!(p.len(), 3);
    }

    #[test]
    fn select_examples() {
        let mut p = pool(4);
        p.insert(version("rain", &[("weather", "rain")], 1, 2.0)).unwrap();
        let attrs = |pairs: &[(&str, &str)]| -> BTreeMap<String, String> {
            pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
        };
        // the narrower version is refused under coverage mode, so use Off to
        // hold both
        let mut both = ModelPool::new(
            PoolConfig { capacity: 4, subsumption: SubsumptionMode::Off },
            version("clean", &[], 0, 1.0),
        )
        .unwrap();
        both.insert(version("rain", &[("weather", "rain")], 1, 3.0)).unwrap();
        both.insert(version("rain-ny", &[("weather", "rain"), ("location", "New York")], 2, 2.0)).unwrap();
        let input = attrs(&[("weather", "rain"), ("location", "New York")]);
        assert_eq!(both.select(&input).version_id, "rain-ny");

        let input = attrs(&[("weather", "clear-day"), ("location", "Tibet")]);
        assert_eq!(p.select(&input).version_id, "clean");

        let mut snow = ModelPool::new(
            PoolConfig { capacity: 4, subsumption: SubsumptionMode::Off },
            version("clean", &[], 0, 1.0),
        )
        .unwrap();
        snow.insert(version("snow-hel", &[("weather", "snow"), ("location", "Helsinki")], 1, 2.0)).unwrap();
        snow.insert(version("snow", &[("weather", "snow")], 2, 3.0)).unwrap();
        let input = attrs(&[("weather", "snow"), ("location", "Helsinki")]);
        assert_eq!(snow.select(&input).version_id, "snow-hel");
        let input = attrs(&[("weather", "snow"), ("location", "Oslo")]);
        assert_eq!(snow.select(&input).version_id, "snow");
    }

    #[test]
    fn select_tie_breaks_on_risk_ratio_then_recency() {
        let mut p = pool(4);
        p.insert(version("loc", &[("location", "Oslo")], 5, 2.0)).unwrap();
        p.insert(version("wx", &[("weather", "fog")], 1, 4.0)).unwrap();
        let input: BTreeMap<String, String> =
            [("weather", "fog"), ("location", "Oslo")].iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        assert_eq!(p.select(&input).version_id, "wx");
        p.insert(version("loc", &[("location", "Oslo")], 6, 4.0)).unwrap();
        assert_eq!(p.select(&input).version_id, "loc");
    }

    #[test]
    fn clean_model_is_pinned() {
        let mut p = pool(1);
        for i in 0..5 {
            p.insert(version(&format!("v{i}"), &[("x", &i.to_string())], i, 2.0)).unwrap();
        }
        assert_eq!(p.len(), 2);
        assert_eq!(p.export().last().unwrap().version_id, "clean");
        let ev = p.insert(version("clean2", &[], 9, 1.0)).unwrap();
        assert_eq!(ev[0].version.version_id, "clean");
        assert_eq!(p.clean().version_id, "clean2");
    }

    #[derive(Debug, Clone)]
    enum Op {
        Insert(Vec<(u8, u8)>),
        Select(Vec<(u8, u8)>),
    }

    fn op() -> impl Strategy<Value = Op> {
        let pairs = prop::collection::btree_map(0u8..3, 0u8..3, 0..4).prop_map(|m| m.into_iter().collect::<Vec<_>>());
        prop_oneof![pairs.clone().prop_map(Op::Insert), pairs.prop_map(Op::Select)]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn capacity_uniqueness_and_closure(
            capacity in 1usize..5,
            mode in prop_oneof![Just(SubsumptionMode::Coverage), Just(SubsumptionMode::AttributeWise), Just(SubsumptionMode::Off)],
            ops in prop::collection::vec(op(), 1..30),
        ) {
            let mut p = ModelPool::new(PoolConfig { capacity, subsumption: mode }, version("clean", &[], 0, 1.0)).unwrap();
            let to_set = |pairs: &[(u8, u8)]| Itemset::from_pairs(pairs.iter().map(|(a, v)| (format!("a{a}"), format!("v{v}"))));
            for (t, op) in ops.iter().enumerate() {
                match op {
                    Op::Insert(pairs) => {
                        let mut v = version(&format!("v{t}"), &[], t as i64 + 1, (t % 5) as f64);
                        v.cause = to_set(pairs);
                        p.insert(v).unwrap();
                    }
                    Op::Select(pairs) => {
                        let attrs = to_set(pairs).as_map().clone();
                        let a = p.select(&attrs).version_id.clone();
                        let b = p.select(&attrs).version_id.clone();
                        prop_assert_eq!(&a, &b);
                        prop_assert!(p.select(&attrs).cause.matches(&attrs));
                    }
                }
                prop_assert!(p.len() <= capacity + 1);
                let causes: Vec<&Itemset> = p.versions().iter().map(|v| &v.cause).collect();
                for (i, a) in causes.iter().enumerate() {
                    prop_assert!(!a.is_empty());
                    for b in &causes[i + 1..] {
                        prop_assert_ne!(a, b);
                        if mode != SubsumptionMode::Off {
                            prop_assert!(!a.is_strict_subset_of(b) && !b.is_strict_subset_of(a));
                        }
                    }
                }
            }
        }
    }
}
