//! Desk-scale classifier standing in for a deployed vision model.
//!
//! Inputs are draws from a Gaussian mixture with one component per class.
//! The classifier is a per-feature affine normalization `γ⊙x + β` followed by
//! a linear layer and softmax; only `γ, β` are ever adapted after training.
//!
//! Weather is simulated with parametric feature corruptions. Each weather
//! name maps to a fixed composition of [`CorruptionSpec`]s whose magnitudes
//! grow with severity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{argmax, softmax_in_place};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training did not converge after {iterations} iterations (loss {loss:.6}, last change {last_delta:.3e})")]
    NotConverged {
        iterations: usize,
        loss: f64,
        last_delta: f64,
    },
}

/// Shape and geometry of the synthetic classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub num_classes: usize,
    pub dim: usize,
    /// Class `k` sits at distance `separation * r_k` from the common offset,
    /// with `r_k` spaced evenly over `[radius_min, radius_max]`. Unequal radii
    /// give some classes more margin than others.
    pub radius_min: f64,
    pub radius_max: f64,
    pub separation: f64,
    /// Added to every coordinate of every class mean.
    pub offset: f64,
    pub noise_std: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            dim: 16,
            radius_min: 2.0,
            radius_max: 3.0,
            separation: 2.5,
            offset: 5.0,
            noise_std: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub num_classes: usize,
    pub dim: usize,
    /// `num_classes × dim`.
    pub means: Vec<Vec<f64>>,
    pub noise_std: f64,
    pub label_probs: Vec<f64>,
}

impl SyntheticTask {
    pub fn generate(config: &TaskConfig, seed: u64) -> Result<Self, ModelError> {
        if config.num_classes < 2 || config.dim < 1 {
            return Err(ModelError::Config("need at least 2 classes and 1 dimension".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.num_classes;
        let means = (0..k)
            .map(|c| {
                let t = c as f64 / (k - 1) as f64;
                let radius = config.separation * (config.radius_min + t * (config.radius_max - config.radius_min));
                let dir: Vec<f64> = (0..config.dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                dir.iter().map(|v| config.offset + radius * v / norm).collect()
            })
            .collect();
        Self::from_means(means, config.noise_std, vec![1.0 / k as f64; k])
    }

    /// Builds a task from explicit means. Identical means are allowed (an
    /// inseparable task); everything else is validated.
    pub fn from_means(means: Vec<Vec<f64>>, noise_std: f64, label_probs: Vec<f64>) -> Result<Self, ModelError> {
        let k = means.len();
        if k < 2 {
            return Err(ModelError::Config("need at least 2 classes".into()));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim || m.iter().any(|v| !v.is_finite())) {
            return Err(ModelError::Config("class means must be finite and share one dimension".into()));
        }
        if !(noise_std > 0.0 && noise_std.is_finite()) {
            return Err(ModelError::Config("noise_std must be positive".into()));
        }
        validate_probs(&label_probs, k)?;
        Ok(Self { num_classes: k, dim, means, noise_std, label_probs })
    }

    pub fn with_label_probs(mut self, probs: Vec<f64>) -> Result<Self, ModelError> {
        validate_probs(&probs, self.num_classes)?;
        self.label_probs = probs;
        Ok(self)
    }

    pub fn sample_class<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Vec<f64> {
        self.means[class]
            .iter()
            .map(|m| m + self.noise_std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub fn sample_label<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.label_probs, rng)
    }

    /// `n` labeled draws following `label_probs`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Vec<Vec<f64>>, Vec<usize>) {
        let labels: Vec<usize> = (0..n).map(|_| self.sample_label(rng)).collect();
        let xs = labels.iter().map(|&y| self.sample_class(y, rng)).collect();
        (xs, labels)
    }

    /// `per_class` draws of every class, in class order.
    pub fn sample_balanced<R: Rng + ?Sized>(&self, per_class: usize, rng: &mut R) -> (Vec<Vec<f64>>, Vec<usize>) {
        let labels: Vec<usize> = (0..self.num_classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
        let xs = labels.iter().map(|&y| self.sample_class(y, rng)).collect();
        (xs, labels)
    }

    /// Mean of the class means.
    pub fn center(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.dim];
        for m in &self.means {
            for (a, b) in c.iter_mut().zip(m) {
                *a += b / self.num_classes as f64;
            }
        }
        c
    }
}

fn validate_probs(p: &[f64], k: usize) -> Result<(), ModelError> {
    if p.len() != k || p.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(ModelError::Config(format!("label distribution must be {k} non-negative reals")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(ModelError::Config(format!("label distribution sums to {s}, not 1")));
    }
    Ok(())
}

pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// The adaptable normalization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl AdapterParams {
    pub fn identity(dim: usize) -> Self {
        Self { gamma: vec![1.0; dim], beta: vec![0.0; dim] }
    }

    /// Standardizing parameters `γ = 1/sqrt(var + eps)`, `β = −mean·γ` fitted
    /// to `xs`.
    pub fn fit(xs: &[Vec<f64>], eps: f64) -> Result<Self, ModelError> {
        if xs.is_empty() {
            return Err(ModelError::InvalidInput("cannot fit normalization to an empty batch".into()));
        }
        let d = xs[0].len();
        let n = xs.len() as f64;
        let mut mean = vec![0.0; d];
        for x in xs {
            if x.len() != d {
                return Err(ModelError::InvalidInput("ragged batch".into()));
            }
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for x in xs {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let gamma: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let beta = mean.iter().zip(&gamma).map(|(m, g)| -m * g).collect();
        Ok(Self { gamma, beta })
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_valid(&self) -> bool {
        self.gamma.len() == self.beta.len()
            && self.gamma.iter().all(|g| g.is_finite() && *g != 0.0)
            && self.beta.iter().all(|b| b.is_finite())
    }
}

/// Normalization + linear + softmax classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyClassifier {
    pub params: AdapterParams,
    /// Row-major `dim × num_classes`: `weights[j * K + k]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// MSP scores of held-out clean data, the reference sample for batch KS
    /// detection.
    pub clean_msp_reference: Vec<f64>,
}

impl ToyClassifier {
    pub fn new(params: AdapterParams, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self, ModelError> {
        let d = params.dim();
        let k = bias.len();
        if k < 2 || weights.len() != d * k || !params.is_valid() {
            return Err(ModelError::InvalidInput(format!(
                "inconsistent shapes: gamma/beta {}/{}, weights {}, bias {}",
                params.gamma.len(),
                params.beta.len(),
                weights.len(),
                k
            )));
        }
        Ok(Self { params, weights, bias, clean_msp_reference: Vec::new() })
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    /// Same linear head, different normalization.
    pub fn with_params(&self, params: AdapterParams) -> Result<Self, ModelError> {
        if params.dim() != self.dim() || !params.is_valid() {
            return Err(ModelError::InvalidInput("adapter parameters do not fit this model".into()));
        }
        Ok(Self { params, ..self.clone() })
    }

    /// Writes the normalized features of `x` into `out`.
    pub fn normalize_into(&self, x: &[f64], out: &mut [f64]) {
        for (((o, v), g), b) in out.iter_mut().zip(x).zip(&self.params.gamma).zip(&self.params.beta) {
            *o = g * v + b;
        }
    }

    /// Logits of normalized features `n`.
    pub fn head_into(&self, n: &[f64], out: &mut [f64]) {
        let k = self.num_classes();
        out.copy_from_slice(&self.bias);
        for (j, nj) in n.iter().enumerate() {
            let row = &self.weights[j * k..(j + 1) * k];
            for (o, w) in out.iter_mut().zip(row) {
                *o += nj * w;
            }
        }
    }

    /// Logits without validation; `out` must hold `num_classes` values.
    pub fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        let mut n = vec![0.0; self.dim()];
        self.normalize_into(x, &mut n);
        self.head_into(&n, out);
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_dim(x)?;
        let mut out = vec![0.0; self.num_classes()];
        self.logits_into(x, &mut out);
        Ok(out)
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut z = self.predict(x)?;
        softmax_in_place(&mut z);
        Ok(z)
    }

    pub fn msp(&self, x: &[f64]) -> Result<f64, ModelError> {
        Ok(self.probabilities(x)?.into_iter().fold(0.0, f64::max))
    }

    pub fn classify(&self, x: &[f64]) -> Result<usize, ModelError> {
        Ok(argmax(&self.predict(x)?))
    }

    pub fn check_dim(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.dim() {
            return Err(ModelError::InvalidInput(format!(
                "sample has {} features, model expects {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Fraction of samples whose argmax logit equals the label.
pub fn accuracy(model: &ToyClassifier, xs: &[Vec<f64>], labels: &[usize]) -> Result<f64, ModelError> {
    if xs.is_empty() || xs.len() != labels.len() {
        return Err(ModelError::InvalidInput(format!(
            "need a non-empty stream with one label per sample ({} samples, {} labels)",
            xs.len(),
            labels.len()
        )));
    }
    let mut correct = 0usize;
    for (x, &y) in xs.iter().zip(labels) {
        correct += usize::from(model.classify(x)? == y);
    }
    Ok(correct as f64 / xs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub train_per_class: usize,
    pub holdout_per_class: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub norm_eps: f64,
    pub max_iters: usize,
    /// Training stops once one full-batch step lowers the loss by less than this.
    pub tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            train_per_class: 200,
            holdout_per_class: 100,
            learning_rate: 0.5,
            weight_decay: 1e-3,
            norm_eps: 1e-2,
            max_iters: 20_000,
            tolerance: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub iterations: usize,
    pub final_loss: f64,
    pub holdout_accuracy: f64,
}

/// Trains on labeled clean data with full-batch gradient descent on the
/// L2-regularized cross-entropy. Labels are used only here.
pub fn train_clean(task: &SyntheticTask, seed: u64) -> Result<ToyClassifier, ModelError> {
    train_clean_with(task, &TrainConfig::default(), seed).map(|(m, _)| m)
}

pub fn train_clean_with(
    task: &SyntheticTask,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ToyClassifier, TrainReport), ModelError> {
    if cfg.train_per_class == 0 || cfg.holdout_per_class == 0 {
        return Err(ModelError::Config("train and holdout sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (xs, ys) = task.sample_balanced(cfg.train_per_class, &mut rng);
    let params = AdapterParams::fit(&xs, cfg.norm_eps)?;
    let (d, k) = (task.dim, task.num_classes);
    let mut model = ToyClassifier::new(params, vec![0.0; d * k], vec![0.0; k])?;
    let normed: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| {
            let mut n = vec![0.0; d];
            model.normalize_into(x, &mut n);
            n
        })
        .collect();
    let n = xs.len() as f64;
    let mut prev = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut last_delta = f64::INFINITY;
    let mut loss = f64::INFINITY;
    let mut z = vec![0.0; k];
    let mut gw = vec![0.0; d * k];
    let mut gb = vec![0.0; k];
    while iterations < cfg.max_iters {
        gw.iter_mut().for_each(|g| *g = 0.0);
        gb.iter_mut().for_each(|g| *g = 0.0);
        loss = cfg.weight_decay * model.weights.iter().map(|w| w * w).sum::<f64>();
        for (x, &y) in normed.iter().zip(&ys) {
            model.head_into(x, &mut z);
            softmax_in_place(&mut z);
            loss -= z[y].max(f64::MIN_POSITIVE).ln() / n;
            z[y] -= 1.0;
            for (j, xj) in x.iter().enumerate() {
                for (g, dz) in gw[j * k..(j + 1) * k].iter_mut().zip(&z) {
                    *g += xj * dz / n;
                }
            }
            for (g, dz) in gb.iter_mut().zip(&z) {
                *g += dz / n;
            }
        }
        if !loss.is_finite() {
            break;
        }
        last_delta = prev - loss;
        if last_delta.abs() < cfg.tolerance {
            converged = true;
            break;
        }
        prev = loss;
        for (w, g) in model.weights.iter_mut().zip(&gw) {
            *w -= cfg.learning_rate * (g + 2.0 * cfg.weight_decay * *w);
        }
        for (b, g) in model.bias.iter_mut().zip(&gb) {
            *b -= cfg.learning_rate * g;
        }
        iterations += 1;
    }
    if !converged {
        return Err(ModelError::NotConverged { iterations, loss, last_delta });
    }
    let (hx, hy) = task.sample_balanced(cfg.holdout_per_class, &mut rng);
    let holdout_accuracy = accuracy(&model, &hx, &hy)?;
    model.clean_msp_reference = hx.iter().map(|x| model.msp(x)).collect::<Result<_, _>>()?;
    Ok((model, TrainReport { iterations, final_loss: loss, holdout_accuracy }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    /// Adds `1.5·s` along a fixed unit direction.
    Shift,
    /// Pulls the sample toward an anchor by factor `1 − c·s`.
    Scale,
    /// Adds seeded Gaussian noise of std `0.1·s`.
    AdditiveNoise,
    /// Zeroes a fraction `0.02·s` of the coordinates. Whole coordinates are
    /// zeroed first; the fractional remainder attenuates one more coordinate
    /// proportionally, so the effect grows strictly with severity.
    FeatureMask,
}

pub const MAX_SEVERITY: u8 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub cause: String,
    pub kind: CorruptionKind,
    /// 1..=5; 0 means no corruption.
    pub severity: u8,
}

/// Weather names with a corruption profile.
pub const WEATHER_CAUSES: [&str; 3] = ["rain", "snow", "fog"];

const SHIFT_PER_LEVEL: f64 = 1.5;
const CONTRAST_PER_LEVEL: f64 = 0.15;
const FOG_PER_LEVEL: f64 = 0.18;
const HAZE_OFFSET: f64 = 2.0;
const NOISE_PER_LEVEL: f64 = 0.1;
const MASK_PER_LEVEL: f64 = 0.02;

/// The corruption composition for a weather label. `clear-day` and
/// severity 0 yield the identity.
pub fn weather_profile(weather: &str, severity: u8) -> Result<Vec<CorruptionSpec>, ModelError> {
    if severity > MAX_SEVERITY {
        return Err(ModelError::Config(format!("severity {severity} outside 0..={MAX_SEVERITY}")));
    }
    let kinds: &[CorruptionKind] = match weather {
        "clear-day" => &[],
        "rain" => &[CorruptionKind::Scale, CorruptionKind::Shift, CorruptionKind::AdditiveNoise],
        "snow" => &[CorruptionKind::Scale, CorruptionKind::FeatureMask],
        "fog" => &[CorruptionKind::Scale],
        other => return Err(ModelError::Config(format!("unknown corruption cause {other:?}"))),
    };
    if severity == 0 {
        return Ok(Vec::new());
    }
    Ok(kinds
        .iter()
        .map(|&kind| CorruptionSpec { cause: weather.to_string(), kind, severity })
        .collect())
}

/// Task-bound corruption parameters: the anchor points and the per-cause
/// directions and coordinate orders, all derived from a seed and the cause
/// name so that each cause is a distinct but reproducible drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corruptor {
    center: Vec<f64>,
    seed: u64,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a; stable across runs and platforms
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl Corruptor {
    pub fn new(task: &SyntheticTask, seed: u64) -> Self {
        Self { center: task.center(), seed }
    }

    fn cause_rng(&self, cause: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(cause))
    }

    fn direction(&self, cause: &str) -> Vec<f64> {
        let mut rng = self.cause_rng(cause);
        let v: Vec<f64> = (0..self.center.len()).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.into_iter().map(|a| a / norm).collect()
    }

    fn mask_order(&self, cause: &str) -> Vec<usize> {
        let mut rng = self.cause_rng(cause);
        // skip the draws used by `direction` so the two are independent
        for _ in 0..self.center.len() {
            let _: f64 = rng.sample(StandardNormal);
        }
        let mut order: Vec<usize> = (0..self.center.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        order
    }

    /// Applies one corruption; `seed` drives any per-sample randomness.
    pub fn corrupt(&self, x: &[f64], spec: &CorruptionSpec, seed: u64) -> Result<Vec<f64>, ModelError> {
        if spec.severity > MAX_SEVERITY {
            return Err(ModelError::Config(format!("severity {} outside 0..={MAX_SEVERITY}", spec.severity)));
        }
        if !WEATHER_CAUSES.contains(&spec.cause.as_str()) {
            return Err(ModelError::Config(format!("unknown corruption cause {:?}", spec.cause)));
        }
        if x.len() != self.center.len() {
            return Err(ModelError::InvalidInput(format!(
                "sample has {} features, corruptor expects {}",
                x.len(),
                self.center.len()
            )));
        }
        let s = f64::from(spec.severity);
        let mut out = x.to_vec();
        if spec.severity == 0 {
            return Ok(out);
        }
        match spec.kind {
            CorruptionKind::Shift => {
                for (o, u) in out.iter_mut().zip(self.direction(&spec.cause)) {
                    *o += SHIFT_PER_LEVEL * s * u;
                }
            }
            CorruptionKind::Scale => {
                let (per_level, lift) = if spec.cause == "fog" {
                    (FOG_PER_LEVEL, HAZE_OFFSET)
                } else {
                    (CONTRAST_PER_LEVEL, 0.0)
                };
                let a = 1.0 - per_level * s;
                for (o, c) in out.iter_mut().zip(&self.center) {
                    let anchor = c + lift;
                    *o = anchor + a * (*o - anchor);
                }
            }
            CorruptionKind::AdditiveNoise => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&spec.cause));
                for o in out.iter_mut() {
                    *o += NOISE_PER_LEVEL * s * rng.sample::<f64, _>(StandardNormal);
                }
            }
            CorruptionKind::FeatureMask => {
                let amount = MASK_PER_LEVEL * s * out.len() as f64;
                let whole = amount.floor() as usize;
                let frac = amount - whole as f64;
                let order = self.mask_order(&spec.cause);
                for &j in order.iter().take(whole) {
                    out[j] = 0.0;
                }
                if let Some(&j) = order.get(whole) {
                    out[j] *= 1.0 - frac;
                }
            }
        }
        Ok(out)
    }

    /// Applies a whole weather profile in order.
    pub fn apply_weather(&self, x: &[f64], weather: &str, severity: u8, seed: u64) -> Result<Vec<f64>, ModelError> {
        let mut out = x.to_vec();
        for spec in weather_profile(weather, severity)? {
            out = self.corrupt(&out, &spec, seed)?;
        }
        Ok(out)
    }
}
