//! Root cause analysis over a window of the drift log.
//!
//! Three stages run in sequence:
//!
//! 1. **FIM** — level-wise apriori search for attribute itemsets that co-occur
//!    with the drift flag, scored by occurrence, support, confidence and risk
//!    ratio, and ranked.
//! 2. **Set reduction** — every passing cause that has a passing strict
//!    attribute-subset is merged under the highest-ranked minimal such subset.
//! 3. **Counterfactual filtering** — coarse causes are popped in rank order; a
//!    cause that still passes on the working copy is accepted and its entries
//!    are un-flagged, so later causes must explain drift on their own.
//!
//! Counting during FIM uses one bitset per attribute value, so the cost of a
//! candidate is linear in the window length.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::hash::Hash;
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::driftlog::{DriftFilter, DriftLogEntry, LogWindow, WorkingCopy};
use crate::itemset::Itemset;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RcaError {
    #[error("invalid thresholds: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Lift of the drift probability inside an itemset over outside it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RiskRatio {
    Finite(f64),
    /// No drift outside the itemset while some inside it.
    Infinite,
    /// The itemset covers the whole window, or neither side has drift.
    Undefined,
}

impl RiskRatio {
    pub fn value(self) -> Option<f64> {
        match self {
            RiskRatio::Finite(v) => Some(v),
            RiskRatio::Infinite => Some(f64::INFINITY),
            RiskRatio::Undefined => None,
        }
    }

    pub fn passes(self, min: f64) -> bool {
        match self {
            RiskRatio::Finite(v) => v >= min,
            RiskRatio::Infinite => true,
            RiskRatio::Undefined => false,
        }
    }

    /// Total order used for ranking: infinite > finite > undefined.
    pub fn rank_cmp(self, other: Self) -> Ordering {
        fn tier(r: RiskRatio) -> u8 {
            match r {
                RiskRatio::Undefined => 0,
                RiskRatio::Finite(_) => 1,
                RiskRatio::Infinite => 2,
            }
        }
        match (self, other) {
            (RiskRatio::Finite(a), RiskRatio::Finite(b)) => a.total_cmp(&b),
            _ => tier(self).cmp(&tier(other)),
        }
    }
}

impl fmt::Display for RiskRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RiskRatio::Finite(v) => write!(f, "{v:.3}"),
            RiskRatio::Infinite => f.write_str("inf"),
            RiskRatio::Undefined => f.write_str("undefined"),
        }
    }
}

// JSON has no infinity: finite values are numbers, +inf is the string "inf",
// undefined is null.
impl Serialize for RiskRatio {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            RiskRatio::Finite(v) => s.serialize_f64(*v),
            RiskRatio::Infinite => s.serialize_str("inf"),
            RiskRatio::Undefined => s.serialize_none(),
        }
    }
}

impl<'de> Deserialize<'de> for RiskRatio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Option::<Raw>::deserialize(d)? {
            None => Ok(RiskRatio::Undefined),
            Some(Raw::Num(v)) => Ok(RiskRatio::Finite(v)),
            Some(Raw::Str(s)) if s == "inf" => Ok(RiskRatio::Infinite),
            Some(Raw::Str(s)) => Err(serde::de::Error::custom(format!("bad risk ratio {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub min_occurrence: f64,
    pub min_support: f64,
    pub min_confidence: f64,
    pub min_risk_ratio: f64,
    pub max_itemset_size: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            min_occurrence: 0.01,
            min_support: 0.01,
            min_confidence: 0.51,
            min_risk_ratio: 1.1,
            max_itemset_size: 3,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), RcaError> {
        for (name, v) in [
            ("min_occurrence", self.min_occurrence),
            ("min_support", self.min_support),
            ("min_confidence", self.min_confidence),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(RcaError::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.min_risk_ratio >= 0.0 && self.min_risk_ratio.is_finite()) {
            return Err(RcaError::Config(format!(
                "min_risk_ratio must be finite and non-negative, got {}",
                self.min_risk_ratio
            )));
        }
        if self.max_itemset_size == 0 {
            return Err(RcaError::Config("max_itemset_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn passes(&self, m: &Metrics) -> bool {
        m.occurrence >= self.min_occurrence
            && m.support >= self.min_support
            && m.confidence >= self.min_confidence
            && m.risk_ratio.passes(self.min_risk_ratio)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub occurrence: f64,
    pub support: f64,
    pub confidence: f64,
    pub risk_ratio: RiskRatio,
    /// Entries containing the itemset.
    pub matched: usize,
    /// Drifted entries containing the itemset.
    pub matched_drift: usize,
}

impl Metrics {
    /// Metrics from raw counts; `None` when support or confidence is
    /// undefined (empty window, no drift, or nothing matched).
    pub fn from_counts(total: usize, drifted: usize, matched: usize, matched_drift: usize) -> Option<Self> {
        if total == 0 || drifted == 0 || matched == 0 {
            return None;
        }
        let md = matched_drift as f64;
        let confidence = md / matched as f64;
        let outside = total - matched;
        let risk_ratio = if outside == 0 {
            RiskRatio::Undefined
        } else {
            let p_out = (drifted - matched_drift) as f64 / outside as f64;
            if p_out > 0.0 {
                RiskRatio::Finite(confidence / p_out)
            } else if confidence > 0.0 {
                RiskRatio::Infinite
            } else {
                RiskRatio::Undefined
            }
        };
        Some(Self {
            occurrence: md / total as f64,
            support: md / drifted as f64,
            confidence,
            risk_ratio,
            matched,
            matched_drift,
        })
    }
}

/// Anything that can count drift per itemset and clear drift flags. The
/// counterfactual stage runs against either a [`WorkingCopy`] or the
/// bitset-encoded window used inside [`analyze`].
pub trait DriftCounts {
    fn total(&self) -> usize;
    fn drifted(&self) -> usize;
    /// `(matched, matched_and_drifted)`.
    fn match_counts(&self, itemset: &Itemset) -> (usize, usize);
    fn mark_no_drift(&mut self, itemset: &Itemset) -> usize;

    fn metrics(&self, itemset: &Itemset) -> Option<Metrics> {
        let (m, md) = self.match_counts(itemset);
        Metrics::from_counts(self.total(), self.drifted(), m, md)
    }
}

impl DriftCounts for WorkingCopy {
    fn total(&self) -> usize {
        self.window().len()
    }
    fn drifted(&self) -> usize {
        self.count(&Itemset::new(), DriftFilter::Drifted)
    }
    fn match_counts(&self, itemset: &Itemset) -> (usize, usize) {
        (
            self.count(itemset, DriftFilter::Any),
            self.count(itemset, DriftFilter::Drifted),
        )
    }
    fn mark_no_drift(&mut self, itemset: &Itemset) -> usize {
        WorkingCopy::mark_no_drift(self, itemset)
    }
}

/// Metrics of `itemset` over `window`; `None` when undefined.
pub fn compute_metrics(window: &LogWindow, itemset: &Itemset) -> Option<Metrics> {
    let total = window.len();
    let drifted = window.count(&Itemset::new(), DriftFilter::Drifted);
    let matched = window.count(itemset, DriftFilter::Any);
    let matched_drift = window.count(itemset, DriftFilter::Drifted);
    Metrics::from_counts(total, drifted, matched, matched_drift)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootCause {
    pub itemset: Itemset,
    #[serde(flatten)]
    pub metrics: Metrics,
    /// Position in the full FIM table ordering, 0 = strongest.
    pub rank: usize,
}

/// Ranking order: risk ratio desc, confidence desc, support desc, smaller
/// itemset first, then lexicographic `(attribute, value)` order.
pub fn rank_order(a: &(Itemset, Metrics), b: &(Itemset, Metrics)) -> Ordering {
    b.1.risk_ratio
        .rank_cmp(a.1.risk_ratio)
        .then_with(|| b.1.confidence.total_cmp(&a.1.confidence))
        .then_with(|| b.1.support.total_cmp(&a.1.support))
        .then_with(|| a.0.len().cmp(&b.0.len()))
        .then_with(|| a.0.cmp(&b.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FimRow {
    #[serde(flatten)]
    pub cause: RootCause,
    pub passes: bool,
}

/// Bitset-encoded window: one bitset per distinct `(attribute, value)` plus
/// the drift flags.
#[derive(Debug, Clone)]
pub struct EncodedWindow {
    n: usize,
    words: usize,
    items: Vec<(String, String)>,
    index: HashMap<(String, String), usize>,
    bits: Vec<Vec<u64>>,
    drift: Vec<u64>,
    drifted: usize,
}

fn popcount(bits: &[u64]) -> usize {
    bits.iter().map(|w| w.count_ones() as usize).sum()
}

fn popcount_and(a: &[u64], b: &[u64]) -> usize {
    a.iter().zip(b).map(|(x, y)| (x & y).count_ones() as usize).sum()
}

impl EncodedWindow {
    pub fn new(entries: &[DriftLogEntry]) -> Self {
        let n = entries.len();
        let words = n.div_ceil(64);
        // sorted item ids make apriori joins and tie-breaks deterministic
        let mut distinct: Vec<(String, String)> = entries
            .iter()
            .flat_map(|e| e.attributes.iter().map(|(k, v)| (k.clone(), v.clone())))
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        distinct.sort();
        let index: HashMap<(String, String), usize> =
            distinct.iter().cloned().enumerate().map(|(i, kv)| (kv, i)).collect();
        let mut bits = vec![vec![0u64; words]; distinct.len()];
        let mut drift = vec![0u64; words];
        let mut key = (String::new(), String::new());
        for (i, e) in entries.iter().enumerate() {
            let (w, b) = (i / 64, 1u64 << (i % 64));
            for (k, v) in &e.attributes {
                key.0.clone_from(k);
                key.1.clone_from(v);
                bits[index[&key]][w] |= b;
            }
            if e.drift {
                drift[w] |= b;
            }
        }
        let drifted = popcount(&drift);
        Self { n, words, items: distinct, index, bits, drift, drifted }
    }

    fn itemset_bits(&self, itemset: &Itemset) -> Option<Vec<u64>> {
        let mut acc = vec![!0u64; self.words];
        if self.n % 64 != 0 {
            if let Some(last) = acc.last_mut() {
                *last = (1u64 << (self.n % 64)) - 1;
            }
        }
        for (k, v) in itemset.iter() {
            let id = *self.index.get(&(k.to_string(), v.to_string()))?;
            for (a, b) in acc.iter_mut().zip(&self.bits[id]) {
                *a &= b;
            }
        }
        Some(acc)
    }

    fn itemset_of(&self, ids: &[usize]) -> Itemset {
        Itemset::from_pairs(ids.iter().map(|&i| (self.items[i].0.clone(), self.items[i].1.clone())))
    }

    /// Entry indices matching `itemset`.
    pub fn matching(&self, itemset: &Itemset) -> Vec<usize> {
        let Some(bits) = self.itemset_bits(itemset) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for (w, &word) in bits.iter().enumerate() {
            let mut x = word;
            while x != 0 {
                out.push(w * 64 + x.trailing_zeros() as usize);
                x &= x - 1;
            }
        }
        out
    }
}

impl DriftCounts for EncodedWindow {
    fn total(&self) -> usize {
        self.n
    }
    fn drifted(&self) -> usize {
        self.drifted
    }
    fn match_counts(&self, itemset: &Itemset) -> (usize, usize) {
        match self.itemset_bits(itemset) {
            Some(b) => (popcount(&b), popcount_and(&b, &self.drift)),
            None => (0, 0),
        }
    }
    fn mark_no_drift(&mut self, itemset: &Itemset) -> usize {
        let Some(b) = self.itemset_bits(itemset) else {
            return 0;
        };
        let mut changed = 0;
        for (d, m) in self.drift.iter_mut().zip(&b) {
            changed += (*d & m).count_ones() as usize;
            *d &= !m;
        }
        self.drifted -= changed;
        changed
    }
}

/// Every scored itemset (passing or not) in rank order.
pub fn fim_table(window: &LogWindow, thresholds: &Thresholds) -> Result<Vec<FimRow>, RcaError> {
    thresholds.validate()?;
    Ok(fim_table_encoded(&EncodedWindow::new(&window.entries), thresholds))
}

fn fim_table_encoded(enc: &EncodedWindow, th: &Thresholds) -> Vec<FimRow> {
    if enc.n == 0 || enc.drifted == 0 {
        return Vec::new();
    }
    let mut scored: Vec<(Itemset, Metrics)> = Vec::new();
    // level 1: every present item is a candidate
    let mut frontier: Vec<(Vec<usize>, Vec<u64>)> = Vec::new();
    for (id, bits) in enc.bits.iter().enumerate() {
        let m = popcount(bits);
        let md = popcount_and(bits, &enc.drift);
        if let Some(metrics) = Metrics::from_counts(enc.n, enc.drifted, m, md) {
            let expand = metrics.occurrence >= th.min_occurrence;
            scored.push((enc.itemset_of(&[id]), metrics));
            if expand {
                frontier.push((vec![id], bits.clone()));
            }
        }
    }
    let mut size = 1;
    while size < th.max_itemset_size && frontier.len() > 1 {
        let frequent: HashSet<&[usize]> = frontier.iter().map(|(ids, _)| ids.as_slice()).collect();
        let mut next = Vec::new();
        for i in 0..frontier.len() {
            for j in i + 1..frontier.len() {
                let (a, abits) = &frontier[i];
                let (b, _) = &frontier[j];
                if a[..size - 1] != b[..size - 1] {
                    // frontier is sorted, so no later j shares the prefix
                    break;
                }
                let (la, lb) = (a[size - 1], b[size - 1]);
                if enc.items[la].0 == enc.items[lb].0 {
                    continue; // one value per attribute
                }
                let mut cand = a.clone();
                cand.push(lb);
                let all_subsets_frequent = (0..cand.len()).all(|skip| {
                    let sub: Vec<usize> = cand
                        .iter()
                        .enumerate()
                        .filter(|&(k, _)| k != skip)
                        .map(|(_, &x)| x)
                        .collect();
                    frequent.contains(sub.as_slice())
                });
                if !all_subsets_frequent {
                    continue;
                }
                let bits: Vec<u64> = abits.iter().zip(&enc.bits[lb]).map(|(x, y)| x & y).collect();
                let m = popcount(&bits);
                let md = popcount_and(&bits, &enc.drift);
                if let Some(metrics) = Metrics::from_counts(enc.n, enc.drifted, m, md) {
                    let expand = metrics.occurrence >= th.min_occurrence;
                    scored.push((enc.itemset_of(&cand), metrics));
                    if expand {
                        next.push((cand, bits));
                    }
                }
            }
        }
        next.sort_by(|x, y| x.0.cmp(&y.0));
        frontier = next;
        size += 1;
    }
    scored.sort_by(rank_order);
    scored
        .into_iter()
        .enumerate()
        .map(|(rank, (itemset, metrics))| FimRow {
            passes: th.passes(&metrics),
            cause: RootCause { itemset, metrics, rank },
        })
        .collect()
}

/// Ranked causes passing all four thresholds. Ranks refer to the full table.
pub fn fim(window: &LogWindow, thresholds: &Thresholds) -> Result<Vec<RootCause>, RcaError> {
    Ok(fim_table(window, thresholds)?
        .into_iter()
        .filter(|r| r.passes)
        .map(|r| r.cause)
        .collect())
}

/// A minimal cause and the finer causes merged under it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseCause {
    pub key: RootCause,
    pub merged: Vec<RootCause>,
}

/// Groups a rank-ordered cause list under its minimal members.
pub fn set_reduction(ranked: &[RootCause]) -> Vec<CoarseCause> {
    let mut out: Vec<CoarseCause> = Vec::new();
    let is_key: Vec<bool> = ranked
        .iter()
        .map(|c| !ranked.iter().any(|o| o.itemset.is_strict_subset_of(&c.itemset)))
        .collect();
    for (c, &key) in ranked.iter().zip(&is_key) {
        if key {
            out.push(CoarseCause { key: c.clone(), merged: Vec::new() });
        }
    }
    for (c, &key) in ranked.iter().zip(&is_key) {
        if key {
            continue;
        }
        // keys were pushed in rank order, so the first hit is the highest ranked
        if let Some(host) = out.iter_mut().find(|k| k.key.itemset.is_strict_subset_of(&c.itemset)) {
            host.merged.push(c.clone());
        }
    }
    out
}

/// A cause accepted by the counterfactual stage, with the metrics it had on
/// the working copy when it was accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptedCause {
    pub cause: RootCause,
    pub accepted_metrics: Metrics,
}

/// Pops coarse causes in rank order against `copy`. A passing key is accepted
/// and its entries are un-flagged; otherwise each merged finer cause is
/// tested, and passing ones are accepted and un-flagged in turn.
pub fn counterfactual_filter<C: DriftCounts>(
    coarse: &[CoarseCause],
    copy: &mut C,
    thresholds: &Thresholds,
) -> Vec<AcceptedCause> {
    let mut accepted = Vec::new();
    let mut try_accept = |cause: &RootCause, copy: &mut C| -> bool {
        match copy.metrics(&cause.itemset) {
            Some(m) if thresholds.passes(&m) => {
                copy.mark_no_drift(&cause.itemset);
                accepted.push(AcceptedCause { cause: cause.clone(), accepted_metrics: m });
                true
            }
            _ => false,
        }
    };
    for group in coarse {
        if !try_accept(&group.key, copy) {
            for sub in &group.merged {
                try_accept(sub, copy);
            }
        }
    }
    accepted
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisMode {
    /// FIM, set reduction and counterfactual filtering.
    #[default]
    Full,
    /// Every passing FIM row is a cause.
    FimOnly,
    /// Coarse keys after set reduction, without counterfactual filtering.
    FimWithSetReduction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootCauseReport {
    pub window_id: u64,
    pub mode: AnalysisMode,
    pub thresholds: Thresholds,
    /// Final causes in acceptance order.
    pub causes: Vec<RootCause>,
    /// Entries matching each final cause, in the same order.
    pub matched_counts: Vec<usize>,
    /// Full scored FIM table in rank order.
    pub table: Vec<FimRow>,
    /// Indices of entries matching no final cause.
    pub clean_entries: Vec<usize>,
    pub entries: usize,
    pub drifted: usize,
    pub elapsed_ms: f64,
}

impl RootCauseReport {
    /// Group of each entry: index of the first final cause it matches, or
    /// `None` for the clean group.
    pub fn assignment(&self, window: &LogWindow) -> Vec<Option<usize>> {
        assign_groups(&window.entries, &self.causes)
    }
}

pub fn assign_groups(entries: &[DriftLogEntry], causes: &[RootCause]) -> Vec<Option<usize>> {
    entries
        .iter()
        .map(|e| causes.iter().position(|c| e.matches(&c.itemset)))
        .collect()
}

pub fn analyze(window: &LogWindow, thresholds: &Thresholds) -> Result<RootCauseReport, RcaError> {
    analyze_with(0, window, thresholds, AnalysisMode::Full)
}

pub fn analyze_with(
    window_id: u64,
    window: &LogWindow,
    thresholds: &Thresholds,
    mode: AnalysisMode,
) -> Result<RootCauseReport, RcaError> {
    thresholds.validate()?;
    let started = Instant::now();
    let mut enc = EncodedWindow::new(&window.entries);
    let drifted = enc.drifted;
    let table = fim_table_encoded(&enc, thresholds);
    let passing: Vec<RootCause> = table.iter().filter(|r| r.passes).map(|r| r.cause.clone()).collect();
    let causes: Vec<RootCause> = match mode {
        AnalysisMode::FimOnly => passing,
        AnalysisMode::FimWithSetReduction => set_reduction(&passing).into_iter().map(|c| c.key).collect(),
        AnalysisMode::Full => {
            let coarse = set_reduction(&passing);
            counterfactual_filter(&coarse, &mut enc, thresholds)
                .into_iter()
                .map(|a| a.cause)
                .collect()
        }
    };
    let mut covered = vec![false; window.len()];
    let mut matched_counts = Vec::with_capacity(causes.len());
    for c in &causes {
        let idx = enc.matching(&c.itemset);
        matched_counts.push(idx.len());
        for i in idx {
            covered[i] = true;
        }
    }
    let clean_entries = covered
        .iter()
        .enumerate()
        .filter(|(_, &c)| !c)
        .map(|(i, _)| i)
        .collect();
    Ok(RootCauseReport {
        window_id,
        mode,
        thresholds: *thresholds,
        causes,
        matched_counts,
        table,
        clean_entries,
        entries: window.len(),
        drifted,
        elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Fowlkes-Mallows score between two labelings of the same elements,
/// counted over unordered pairs. Two labelings with no co-clustered pairs at
/// all agree perfectly and score 1.
pub fn fms<A: Eq + Hash, B: Eq + Hash>(a: &[A], b: &[B]) -> Result<f64, RcaError> {
    if a.len() != b.len() {
        return Err(RcaError::InvalidInput(format!(
            "partitions cover different universes ({} vs {} elements)",
            a.len(),
            b.len()
        )));
    }
    fn pairs(n: usize) -> u128 {
        let n = n as u128;
        n * n.saturating_sub(1) / 2
    }
    let mut joint: HashMap<(&A, &B), usize> = HashMap::new();
    let mut ca: HashMap<&A, usize> = HashMap::new();
    let mut cb: HashMap<&B, usize> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let tp: u128 = joint.values().map(|&n| pairs(n)).sum();
    let pa: u128 = ca.values().map(|&n| pairs(n)).sum();
    let pb: u128 = cb.values().map(|&n| pairs(n)).sum();
    Ok(match (pa, pb) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => ((tp as f64 / pa as f64) * (tp as f64 / pb as f64)).sqrt(),
    })
}

/// Groups entries by the itemset of their final cause (or `None`), the
/// labeling compared against ground truth when scoring with [`fms`].
pub fn cause_labels(entries: &[DriftLogEntry], causes: &[RootCause]) -> Vec<Option<BTreeMap<String, String>>> {
    assign_groups(entries, causes)
        .into_iter()
        .map(|g| g.map(|i| causes[i].itemset.as_map().clone()))
        .collect()
}
