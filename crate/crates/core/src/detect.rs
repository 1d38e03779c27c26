//! Per-inference and batch drift detection over model output scores.
//!
//! The default detector thresholds the maximum softmax probability (MSP) of a
//! single logit vector. A two-sample Kolmogorov-Smirnov test over batches of
//! MSP scores is provided for comparison, along with F1 scoring of detector
//! verdicts against ground truth.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default MSP threshold below which an inference is flagged as drifted.
pub const DEFAULT_MSP_THRESHOLD: f64 = 0.9;

/// Default significance level of the two-sample KS test.
pub const DEFAULT_KS_SIGNIFICANCE: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("score undefined: {0}")]
    Undefined(String),
}

/// Un-normalized class scores produced by one inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self, DetectError> {
        if values.len() < 2 {
            return Err(DetectError::InvalidInput(format!(
                "logit vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DetectError::InvalidInput(format!(
                "non-finite logit at index {i}"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Index of the largest logit; the first index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl TryFrom<Vec<f64>> for LogitVector {
    type Error = DetectError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<LogitVector> for Vec<f64> {
    fn from(v: LogitVector) -> Self {
        v.0
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax writing into `out`. Inputs are assumed finite.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// In-place variant of [`softmax_into`].
pub(crate) fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

/// Softmax of a logit vector, computed with max-subtraction.
pub fn softmax(logits: &LogitVector) -> Vec<f64> {
    let mut out = vec![0.0; logits.num_classes()];
    softmax_into(logits.values(), &mut out);
    out
}

/// Maximum softmax probability; lies in `[1/K, 1]`.
pub fn msp_score(logits: &LogitVector) -> f64 {
    softmax(logits).into_iter().fold(0.0, f64::max)
}

/// Outcome of thresholding a single inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionVerdict {
    pub drift: bool,
    pub msp: f64,
}

fn check_threshold(threshold: f64) -> Result<(), DetectError> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(DetectError::Config(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )))
    }
}

/// Flags drift when the MSP is strictly below `threshold`.
pub fn detect_msp(logits: &LogitVector, threshold: f64) -> Result<DetectionVerdict, DetectError> {
    check_threshold(threshold)?;
    let msp = msp_score(logits);
    Ok(DetectionVerdict {
        drift: msp < threshold,
        msp,
    })
}

/// A confidence score derived from logits; larger means more confident.
pub trait ConfidenceScore {
    fn name(&self) -> &'static str;
    fn confidence(&self, logits: &LogitVector) -> f64;
}

/// Maximum softmax probability.
#[derive(Debug, Clone, Copy, Default)]
pub struct Msp;

impl ConfidenceScore for Msp {
    fn name(&self) -> &'static str {
        "msp"
    }

    fn confidence(&self, logits: &LogitVector) -> f64 {
        msp_score(logits)
    }
}

/// One minus the softmax entropy normalized by `ln K`; lies in `[0, 1]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct NormalizedNegEntropy;

impl ConfidenceScore for NormalizedNegEntropy {
    fn name(&self) -> &'static str {
        "neg_entropy"
    }

    fn confidence(&self, logits: &LogitVector) -> f64 {
        let p = softmax(logits);
        let h: f64 = p.iter().filter(|&&q| q > 0.0).map(|q| -q * q.ln()).sum();
        1.0 - h / (p.len() as f64).ln()
    }
}

/// Negative free energy, `log sum exp(z)`. Unbounded.
#[derive(Debug, Clone, Copy, Default)]
pub struct NegEnergy;

impl ConfidenceScore for NegEnergy {
    fn name(&self) -> &'static str {
        "neg_energy"
    }

    fn confidence(&self, logits: &LogitVector) -> f64 {
        let z = logits.values();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
    }
}

/// Threshold detector over a pluggable confidence score.
#[derive(Debug, Clone)]
pub struct ThresholdDetector<S = Msp> {
    score: S,
    threshold: f64,
}

impl Default for ThresholdDetector<Msp> {
    fn default() -> Self {
        Self {
            score: Msp,
            threshold: DEFAULT_MSP_THRESHOLD,
        }
    }
}

impl<S: ConfidenceScore> ThresholdDetector<S> {
    /// Bounded scores (MSP, normalized entropy) require a threshold in
    /// `(0, 1)`; use [`ThresholdDetector::unbounded`] for energy scores.
    pub fn new(score: S, threshold: f64) -> Result<Self, DetectError> {
        check_threshold(threshold)?;
        Ok(Self { score, threshold })
    }

    pub fn unbounded(score: S, threshold: f64) -> Result<Self, DetectError> {
        if !threshold.is_finite() {
            return Err(DetectError::Config("threshold must be finite".into()));
        }
        Ok(Self { score, threshold })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Returns `(drift, score)`.
    pub fn detect(&self, logits: &LogitVector) -> (bool, f64) {
        let c = self.score.confidence(logits);
        (c < self.threshold, c)
    }
}

/// Sup-norm distance between the empirical CDFs of two samples.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64, DetectError> {
    if a.is_empty() || b.is_empty() {
        return Err(DetectError::InvalidInput("KS samples must be non-empty".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(DetectError::InvalidInput("KS samples contain NaN".into()));
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n, m) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    // Walk both sorted samples; at each distinct value advance past all ties
    // before comparing the CDFs.
    while i < xs.len() && j < ys.len() {
        let x = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= x {
            i += 1;
        }
        while j < ys.len() && ys[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    Ok(d)
}

/// Asymptotic two-sample KS critical value `c(alpha) * sqrt((n+m)/(n*m))`.
pub fn ks_critical_value(n: usize, m: usize, significance: f64) -> Result<f64, DetectError> {
    if !(significance > 0.0 && significance < 1.0) {
        return Err(DetectError::Config(format!(
            "significance must lie in (0, 1), got {significance}"
        )));
    }
    if n == 0 || m == 0 {
        return Err(DetectError::InvalidInput("sample sizes must be positive".into()));
    }
    let c = (-(significance / 2.0).ln() / 2.0).sqrt();
    let (n, m) = (n as f64, m as f64);
    Ok(c * ((n + m) / (n * m)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsVerdict {
    pub drift: bool,
    pub statistic: f64,
    pub critical_value: f64,
}

/// Batch-level KS detection: one verdict applies to the whole batch.
pub fn detect_ks(
    batch_scores: &[f64],
    reference_scores: &[f64],
    significance: f64,
) -> Result<KsVerdict, DetectError> {
    if reference_scores.is_empty() {
        return Err(DetectError::Config("KS reference sample is empty".into()));
    }
    if batch_scores.is_empty() {
        return Err(DetectError::InvalidInput("KS batch is empty".into()));
    }
    let statistic = ks_statistic(batch_scores, reference_scores)?;
    let critical_value = ks_critical_value(batch_scores.len(), reference_scores.len(), significance)?;
    Ok(KsVerdict {
        drift: statistic > critical_value,
        statistic,
        critical_value,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

/// `2TP / (2TP + FP + FN)`.
pub fn f1(counts: &ConfusionCounts) -> Result<f64, DetectError> {
    let denom = 2 * counts.tp + counts.fp + counts.fn_;
    if denom == 0 {
        return Err(DetectError::Undefined(
            "F1 is undefined without positives or predictions".into(),
        ));
    }
    Ok(2.0 * counts.tp as f64 / denom as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_closed_forms() {
        let p = softmax(&lv(&[0.0; 4]));
        assert!(p.iter().all(|q| (q - 0.25).abs() < 1e-12));
        let p = softmax(&lv(&[2f64.ln(), 0.0]));
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
        let p = softmax(&lv(&[1000.0, 0.0]));
        assert!(p.iter().all(|q| q.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-300);
    }

    #[test]
    fn rejects_bad_logits() {
        assert!(LogitVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(LogitVector::new(vec![f64::INFINITY, 0.0]).is_err());
        assert!(LogitVector::new(vec![1.0]).is_err());
        assert!(serde_json::from_str::<LogitVector>("[1.0]").is_err());
    }

    #[test]
    fn msp_examples() {
        assert!((msp_score(&lv(&[0.0; 4])) - 0.25).abs() < 1e-12);
        // e^10 / (e^10 + 2)
        let expected = 10f64.exp() / (10f64.exp() + 2.0);
        assert!((msp_score(&lv(&[10.0, 0.0, 0.0])) - expected).abs() < 1e-12);
        assert!((expected - 0.99991).abs() < 5e-6);
        assert!((msp_score(&lv(&[9f64.ln(), 0.0])) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn msp_threshold_boundary() {
        assert!(detect_msp(&lv(&[0.0; 4]), 0.9).unwrap().drift);
        // ln 9 is not representable, so this score lands within an ulp of 0.9
        let v = detect_msp(&lv(&[9f64.ln(), 0.0]), 0.9).unwrap();
        assert!((v.msp - 0.9).abs() < 1e-15);
        // at exact equality the verdict is no-drift
        let z = lv(&[9f64.ln(), 0.0]);
        assert!(!detect_msp(&z, msp_score(&z)).unwrap().drift);
        let z = lv(&[1.3, -0.4, 0.2]);
        assert!(!detect_msp(&z, msp_score(&z)).unwrap().drift);
        let exact = detect_msp(&lv(&[0.0, 0.0]), 0.5).unwrap();
        assert_eq!(exact.msp, 0.5);
        assert!(!exact.drift);
        assert!(!detect_msp(&lv(&[10.0, 0.0, 0.0]), 0.9).unwrap().drift);
        assert!(detect_msp(&lv(&[0.0, 0.0]), 1.0).is_err());
        assert!(detect_msp(&lv(&[0.0, 0.0]), 0.0).is_err());
    }

    #[test]
    fn alternative_scores() {
        let uniform = lv(&[0.0; 4]);
        assert!(NormalizedNegEntropy.confidence(&uniform).abs() < 1e-12);
        assert!((NegEnergy.confidence(&uniform) - 4f64.ln()).abs() < 1e-12);
        let det = ThresholdDetector::new(NormalizedNegEntropy, 0.5).unwrap();
        assert!(det.detect(&uniform).0);
        assert!(!det.detect(&lv(&[50.0, 0.0, 0.0, 0.0])).0);
        let default = ThresholdDetector::default();
        assert_eq!(default.threshold(), DEFAULT_MSP_THRESHOLD);
        assert!(ThresholdDetector::unbounded(NegEnergy, f64::NAN).is_err());
    }

    // Brute force: evaluate both ECDFs at every sample point.
    fn ks_oracle(a: &[f64], b: &[f64]) -> f64 {
        let ecdf = |s: &[f64], t: f64| s.iter().filter(|&&v| v <= t).count() as f64 / s.len() as f64;
        a.iter()
            .chain(b)
            .map(|&t| (ecdf(a, t) - ecdf(b, t)).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn ks_examples() {
        assert_eq!(ks_statistic(&[0.1, 0.5, 0.9], &[0.1, 0.5, 0.9]).unwrap(), 0.0);
        assert_eq!(ks_statistic(&[0.1, 0.2], &[0.8, 0.9]).unwrap(), 1.0);
        let a = [0.1, 0.4, 0.6];
        let b = [0.3, 0.7];
        // breakpoints: 0.1 -> |1/3-0|, 0.3 -> |1/3-1/2|, 0.4 -> |2/3-1/2|,
        // 0.6 -> |1-1/2| = 1/2, 0.7 -> 0
        assert!((ks_oracle(&a, &b) - 0.5).abs() < 1e-12);
        assert!((ks_statistic(&a, &b).unwrap() - 0.5).abs() < 1e-12);
        assert!(ks_statistic(&[], &[1.0]).is_err());
    }

    #[test]
    fn ks_detection() {
        let reference: Vec<f64> = (0..64).map(|i| 0.5 + i as f64 / 200.0).collect();
        let subset: Vec<f64> = reference.iter().step_by(2).copied().collect();
        // a subset of the reference has D well under any critical value here
        assert!(!detect_ks(&reference, &reference, 0.05).unwrap().drift);
        let below: Vec<f64> = (0..32).map(|i| 0.1 + i as f64 / 1000.0).collect();
        let refs32: Vec<f64> = reference.iter().take(32).copied().collect();
        let v = detect_ks(&below, &refs32, 0.05).unwrap();
        assert_eq!(v.statistic, 1.0);
        assert!(v.drift);
        assert!(!detect_ks(&subset, &reference, 0.05).unwrap().drift);
        assert!(detect_ks(&below, &[], 0.05).is_err());
    }

    #[test]
    fn ks_half_overlap_matches_direct_formula() {
        // n = m = 8, half of each sample overlapping the other's range
        let a = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        let b = [0.45, 0.55, 0.65, 0.75, 0.85, 0.95, 1.05, 1.15];
        let d = ks_oracle(&a, &b);
        assert!((d - 0.5).abs() < 1e-12);
        // c(0.05) = sqrt(-ln(0.025)/2) = 1.35810..., times sqrt(16/64) = 0.5
        let crit = (-(0.025f64).ln() / 2.0).sqrt() * 0.5;
        let v = detect_ks(&a, &b, 0.05).unwrap();
        assert!((v.critical_value - crit).abs() < 1e-12);
        assert!((v.critical_value - 0.679).abs() < 1e-3);
        assert_eq!(v.drift, d > crit);
        assert!(!v.drift);
        // at alpha = 0.5, c = sqrt(ln 4 / 2) = 0.8326, critical 0.4163 < 0.5
        assert!(detect_ks(&a, &b, 0.5).unwrap().drift);
    }

    #[test]
    fn f1_examples() {
        let c = |tp, fp, fn_| ConfusionCounts { tp, fp, fn_, tn: 0 };
        assert_eq!(f1(&c(1, 0, 0)).unwrap(), 1.0);
        assert!((f1(&c(5, 3, 2)).unwrap() - 10.0 / 15.0).abs() < 1e-12);
        assert_eq!(f1(&c(0, 4, 4)).unwrap(), 0.0);
        assert!(f1(&c(0, 0, 0)).is_err());
        let mut counts = ConfusionCounts::default();
        counts.record(true, true);
        counts.record(true, false);
        counts.record(false, true);
        counts.record(false, false);
        assert_eq!(counts, ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 });
    }

    fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, 2..12)
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(z in logits_strategy(), c in -100.0f64..100.0) {
            let p = softmax(&lv(&z));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let q = softmax(&lv(&shifted));
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn msp_bounds(z in logits_strategy()) {
            let k = z.len() as f64;
            let m = msp_score(&lv(&z));
            prop_assert!(m >= 1.0 / k - 1e-12 && m <= 1.0);
        }

        #[test]
        fn msp_verdict_monotone_in_threshold(z in logits_strategy(), t1 in 0.01f64..0.99, t2 in 0.01f64..0.99) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let l = lv(&z);
            if detect_msp(&l, lo).unwrap().drift {
                prop_assert!(detect_msp(&l, hi).unwrap().drift);
            }
        }

        #[test]
        fn ks_properties(a in prop::collection::vec(0.0f64..1.0, 1..40), b in prop::collection::vec(0.0f64..1.0, 1..40)) {
            let ab = ks_statistic(&a, &b).unwrap();
            prop_assert_eq!(ab, ks_statistic(&b, &a).unwrap());
            prop_assert_eq!(ks_statistic(&a, &a).unwrap(), 0.0);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - ks_oracle(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn f1_matches_precision_recall(tp in 1u64..1000, fp in 0u64..1000, fn_ in 0u64..1000) {
            let precision = tp as f64 / (tp + fp) as f64;
            let recall = tp as f64 / (tp + fn_) as f64;
            let composed = 2.0 * precision * recall / (precision + recall);
            let direct = f1(&ConfusionCounts { tp, fp, fn_, tn: 0 }).unwrap();
            prop_assert!((composed - direct).abs() < 1e-12);
        }
    }
}
