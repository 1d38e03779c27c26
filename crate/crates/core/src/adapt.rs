//! Test-time adaptation of the normalization parameters.
//!
//! Three operations, all touching only `γ, β`:
//!
//! * [`recalibrate`] re-estimates the normalization statistics from an
//!   unlabeled batch, the way batch-norm layers swap in test-time statistics.
//! * [`adapt_tent`] minimizes the mean prediction entropy of a batch by
//!   gradient descent with the analytic gradient from [`grad_tent`].
//! * [`adapt_memo`] minimizes the marginal entropy of noise-augmented copies
//!   of each input, using a central-difference gradient.
//!
//! Both descent loops halve the learning rate after three consecutive loss
//! increases and give up after three halvings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::softmax_in_place;
use crate::model::{AdapterParams, ModelError, ToyClassifier};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdaptError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("adaptation diverged: {0}")]
    Diverged(String),
}

impl From<ModelError> for AdaptError {
    fn from(e: ModelError) -> Self {
        AdaptError::InvalidInput(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMethod {
    #[default]
    Tent,
    Memo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub method: AdaptMethod,
    pub steps: usize,
    pub learning_rate: f64,
    /// Smallest batch worth adapting on; smaller groups are deferred.
    pub batch_size: usize,
    /// MEMO copies per input.
    pub augmentations: usize,
    /// Std of the Gaussian noise MEMO adds to each copy.
    pub augment_std: f64,
    /// Re-estimate normalization statistics on the batch before TENT descent.
    /// MEMO works from single-input augmentations and ignores this.
    pub recalibrate: bool,
    pub norm_eps: f64,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            method: AdaptMethod::Tent,
            steps: 10,
            learning_rate: 0.1,
            batch_size: 32,
            augmentations: 8,
            augment_std: 0.5,
            recalibrate: true,
            norm_eps: 1e-2,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), AdaptError> {
        if self.steps == 0 {
            return Err(AdaptError::Config("steps must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(AdaptError::Config("learning rate must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(AdaptError::Config("batch size must be at least 2".into()));
        }
        if self.method == AdaptMethod::Memo && self.augmentations < 2 {
            return Err(AdaptError::Config("MEMO needs at least 2 augmentations".into()));
        }
        if !(self.augment_std >= 0.0 && self.augment_std.is_finite()) {
            return Err(AdaptError::Config("augment_std must be non-negative".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(AdaptError::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Shannon entropy in nats with `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64, AdaptError> {
    if p.is_empty() || p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(AdaptError::InvalidInput("probabilities must lie in [0, 1]".into()));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(AdaptError::InvalidInput(format!("probabilities sum to {s}")));
    }
    Ok(entropy_unchecked(p))
}

fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn check_batch(model: &ToyClassifier, batch: &[Vec<f64>]) -> Result<(), AdaptError> {
    if batch.len() < 2 {
        return Err(AdaptError::Config(format!(
            "entropy minimization needs a batch of at least 2, got {}",
            batch.len()
        )));
    }
    for x in batch {
        model.check_dim(x)?;
    }
    Ok(())
}

/// Log-probabilities and probabilities of one input.
fn log_softmax(model: &ToyClassifier, x: &[f64], z: &mut [f64], p: &mut [f64]) {
    model.logits_into(x, z);
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    for (zi, pi) in z.iter_mut().zip(p.iter_mut()) {
        *zi -= lse;
        *pi = zi.exp();
    }
}

/// Mean prediction entropy over the batch.
pub fn tent_loss(model: &ToyClassifier, batch: &[Vec<f64>]) -> Result<f64, AdaptError> {
    check_batch(model, batch)?;
    Ok(tent_loss_unchecked(model, batch))
}

fn tent_loss_unchecked(model: &ToyClassifier, batch: &[Vec<f64>]) -> f64 {
    let k = model.num_classes();
    let (mut z, mut p) = (vec![0.0; k], vec![0.0; k]);
    let mut total = 0.0;
    for x in batch {
        log_softmax(model, x, &mut z, &mut p);
        total -= p.iter().zip(&z).map(|(pi, lpi)| pi * lpi).sum::<f64>();
    }
    total / batch.len() as f64
}

/// Gradient of a loss with respect to `γ` and `β`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrad {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ParamGrad {
    pub fn max_abs(&self) -> f64 {
        self.gamma.iter().chain(&self.beta).fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Analytic gradient of [`tent_loss`]. Per input, `∂H/∂z_k = −p_k(ln p_k + H)`
/// is pulled back through the linear layer to the normalized features and
/// then to `γ` (times the input) and `β`.
pub fn grad_tent(model: &ToyClassifier, batch: &[Vec<f64>]) -> Result<ParamGrad, AdaptError> {
    check_batch(model, batch)?;
    Ok(grad_tent_unchecked(model, batch).1)
}

fn grad_tent_unchecked(model: &ToyClassifier, batch: &[Vec<f64>]) -> (f64, ParamGrad) {
    let (d, k) = (model.dim(), model.num_classes());
    let n = batch.len() as f64;
    let (mut z, mut p, mut dz) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    let mut g = ParamGrad { gamma: vec![0.0; d], beta: vec![0.0; d] };
    let mut loss = 0.0;
    for x in batch {
        log_softmax(model, x, &mut z, &mut p);
        let h = -p.iter().zip(&z).map(|(pi, lpi)| pi * lpi).sum::<f64>();
        loss += h / n;
        for ((g_k, pi), lpi) in dz.iter_mut().zip(&p).zip(&z) {
            *g_k = -pi * (lpi + h);
        }
        for j in 0..d {
            let row = &model.weights[j * k..(j + 1) * k];
            let dn: f64 = row.iter().zip(&dz).map(|(w, g)| w * g).sum();
            g.gamma[j] += dn * x[j] / n;
            g.beta[j] += dn / n;
        }
    }
    (loss, g)
}

/// Replaces `γ, β` with statistics of the batch; `W, b` are untouched.
pub fn recalibrate(model: &ToyClassifier, batch: &[Vec<f64>], eps: f64) -> Result<ToyClassifier, AdaptError> {
    check_batch(model, batch)?;
    Ok(model.with_params(AdapterParams::fit(batch, eps)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub method: AdaptMethod,
    pub recalibrated: bool,
    /// Objective of the input model on the batch.
    pub initial_loss: f64,
    /// Objective of the returned model on the batch.
    pub final_loss: f64,
    pub steps: usize,
    pub lr_halvings: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapted {
    pub model: ToyClassifier,
    pub report: AdaptReport,
}

/// Plain gradient descent on `γ, β` with the divergence guard.
fn descend<F>(start: &ToyClassifier, cfg: &AdaptConfig, mut loss_and_grad: F) -> Result<(ToyClassifier, f64, usize), AdaptError>
where
    F: FnMut(&ToyClassifier) -> (f64, ParamGrad),
{
    let mut model = start.clone();
    let mut lr = cfg.learning_rate;
    let mut halvings = 0;
    let mut rising = 0;
    let mut prev = f64::INFINITY;
    for _ in 0..cfg.steps {
        let (loss, g) = loss_and_grad(&model);
        if !loss.is_finite() || !g.max_abs().is_finite() {
            return Err(AdaptError::Diverged(format!("non-finite loss {loss}")));
        }
        if loss > prev {
            rising += 1;
            if rising == 3 {
                halvings += 1;
                if halvings > 3 {
                    return Err(AdaptError::Diverged(format!(
                        "loss kept rising after {} learning-rate halvings",
                        halvings - 1
                    )));
                }
                lr /= 2.0;
                rising = 0;
            }
        } else {
            rising = 0;
        }
        prev = loss;
        for (v, gv) in model.params.gamma.iter_mut().zip(&g.gamma) {
            *v -= lr * gv;
        }
        for (v, gv) in model.params.beta.iter_mut().zip(&g.beta) {
            *v -= lr * gv;
        }
    }
    let (final_loss, _) = loss_and_grad(&model);
    if !final_loss.is_finite() || !model.params.is_valid() {
        return Err(AdaptError::Diverged(format!("final loss {final_loss}")));
    }
    Ok((model, final_loss, halvings))
}

/// TENT on the batch (after optional recalibration). On error the caller
/// keeps the input model.
pub fn adapt_tent(model: &ToyClassifier, batch: &[Vec<f64>], cfg: &AdaptConfig) -> Result<Adapted, AdaptError> {
    cfg.validate()?;
    check_batch(model, batch)?;
    let initial_loss = tent_loss_unchecked(model, batch);
    let start = if cfg.recalibrate { recalibrate(model, batch, cfg.norm_eps)? } else { model.clone() };
    let (out, final_loss, lr_halvings) = descend(&start, cfg, |m| grad_tent_unchecked(m, batch))?;
    Ok(Adapted {
        model: out,
        report: AdaptReport {
            method: AdaptMethod::Tent,
            recalibrated: cfg.recalibrate,
            initial_loss,
            final_loss,
            steps: cfg.steps,
            lr_halvings,
            batch_size: batch.len(),
        },
    })
}

/// Seeded noise offsets for every (input, copy) pair.
pub fn memo_augmentations(batch_len: usize, dim: usize, cfg: &AdaptConfig) -> Vec<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.augment_std).expect("validated std");
    (0..batch_len)
        .map(|_| {
            (0..cfg.augmentations)
                .map(|_| (0..dim).map(|_| noise.sample(&mut rng)).collect())
                .collect()
        })
        .collect()
}

/// Mean over inputs of the entropy of the augmentation-averaged prediction.
pub fn memo_loss(
    model: &ToyClassifier,
    batch: &[Vec<f64>],
    augments: &[Vec<Vec<f64>>],
) -> Result<f64, AdaptError> {
    if batch.is_empty() || augments.len() != batch.len() || augments.iter().any(|a| a.is_empty()) {
        return Err(AdaptError::InvalidInput("every input needs at least one augmentation".into()));
    }
    for x in batch {
        model.check_dim(x)?;
    }
    Ok(memo_loss_unchecked(model, batch, augments))
}

fn memo_loss_unchecked(model: &ToyClassifier, batch: &[Vec<f64>], augments: &[Vec<Vec<f64>>]) -> f64 {
    let k = model.num_classes();
    let mut avg = vec![0.0; k];
    let mut z = vec![0.0; k];
    let mut xa = vec![0.0; model.dim()];
    let mut total = 0.0;
    for (x, copies) in batch.iter().zip(augments) {
        avg.iter_mut().for_each(|a| *a = 0.0);
        for noise in copies {
            for ((o, v), e) in xa.iter_mut().zip(x).zip(noise) {
                *o = v + e;
            }
            model.logits_into(&xa, &mut z);
            softmax_in_place(&mut z);
            for (a, p) in avg.iter_mut().zip(&z) {
                *a += p / copies.len() as f64;
            }
        }
        total += entropy_unchecked(&avg);
    }
    total / batch.len() as f64
}

const MEMO_FD_STEP: f64 = 1e-5;

fn param_mut(m: &mut ToyClassifier, which: usize, j: usize) -> &mut f64 {
    if which == 0 {
        &mut m.params.gamma[j]
    } else {
        &mut m.params.beta[j]
    }
}

fn memo_loss_and_grad(model: &ToyClassifier, batch: &[Vec<f64>], augments: &[Vec<Vec<f64>>]) -> (f64, ParamGrad) {
    let loss = memo_loss_unchecked(model, batch, augments);
    let d = model.dim();
    let mut probe = model.clone();
    let mut g = ParamGrad { gamma: vec![0.0; d], beta: vec![0.0; d] };
    for j in 0..d {
        for which in 0..2 {
            let orig = *param_mut(&mut probe, which, j);
            *param_mut(&mut probe, which, j) = orig + MEMO_FD_STEP;
            let up = memo_loss_unchecked(&probe, batch, augments);
            *param_mut(&mut probe, which, j) = orig - MEMO_FD_STEP;
            let down = memo_loss_unchecked(&probe, batch, augments);
            *param_mut(&mut probe, which, j) = orig;
            let gv = (up - down) / (2.0 * MEMO_FD_STEP);
            if which == 0 {
                g.gamma[j] = gv;
            } else {
                g.beta[j] = gv;
            }
        }
    }
    (loss, g)
}

/// MEMO restricted to the normalization parameters (after optional
/// recalibration).
pub fn adapt_memo(model: &ToyClassifier, batch: &[Vec<f64>], cfg: &AdaptConfig) -> Result<Adapted, AdaptError> {
    let cfg = AdaptConfig { method: AdaptMethod::Memo, ..cfg.clone() };
    cfg.validate()?;
    if batch.is_empty() {
        return Err(AdaptError::Config("MEMO needs at least one input".into()));
    }
    for x in batch {
        model.check_dim(x)?;
    }
    let augments = memo_augmentations(batch.len(), model.dim(), &cfg);
    let initial_loss = memo_loss_unchecked(model, batch, &augments);
    // Each input is adapted on from its own augmented copies; there are no
    // batch statistics to swap in, so `recalibrate` does not apply here.
    let (out, final_loss, lr_halvings) = descend(model, &cfg, |m| memo_loss_and_grad(m, batch, &augments))?;
    Ok(Adapted {
        model: out,
        report: AdaptReport {
            method: AdaptMethod::Memo,
            recalibrated: false,
            initial_loss,
            final_loss,
            steps: cfg.steps,
            lr_halvings,
            batch_size: batch.len(),
        },
    })
}

/// Runs the configured method.
pub fn adapt(model: &ToyClassifier, batch: &[Vec<f64>], cfg: &AdaptConfig) -> Result<Adapted, AdaptError> {
    match cfg.method {
        AdaptMethod::Tent => adapt_tent(model, batch, cfg),
        AdaptMethod::Memo => adapt_memo(model, batch, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{accuracy, train_clean, Corruptor, CorruptionKind, CorruptionSpec, SyntheticTask, TaskConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_model(rng: &mut ChaCha8Rng, d: usize, k: usize) -> ToyClassifier {
        let params = AdapterParams {
            gamma: (0..d).map(|_| rng.random_range(0.5..1.5)).collect(),
            beta: (0..d).map(|_| rng.random_range(-0.5..0.5)).collect(),
        };
        let w = (0..d * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = (0..k).map(|_| rng.random_range(-0.5..0.5)).collect();
        ToyClassifier::new(params, w, b).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(entropy(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn tent_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_model(&mut rng, 5, 3);
        let batch = random_batch(&mut rng, 9, 5);
        // independent oracle: per-sample softmax then entropy, averaged
        let oracle = batch
            .iter()
            .map(|x| entropy(&m.probabilities(x).unwrap()).unwrap())
            .sum::<f64>()
            / batch.len() as f64;
        assert!((tent_loss(&m, &batch).unwrap() - oracle).abs() < 1e-12);

        let same = vec![batch[0].clone(); 4];
        let single = entropy(&m.probabilities(&batch[0]).unwrap()).unwrap();
        assert!((tent_loss(&m, &same).unwrap() - single).abs() < 1e-12);

        // huge logit margins: every prediction one-hot
        let confident = ToyClassifier::new(
            AdapterParams::identity(2),
            vec![1e4, -1e4, -1e4, 1e4],
            vec![0.0, 0.0],
        )
        .unwrap();
        assert_eq!(tent_loss(&confident, &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), 0.0);
        assert!(matches!(tent_loss(&m, &batch[..1]), Err(AdaptError::Config(_))));
    }

    fn finite_difference(m: &ToyClassifier, batch: &[Vec<f64>], h: f64) -> ParamGrad {
        let d = m.dim();
        let mut g = ParamGrad { gamma: vec![0.0; d], beta: vec![0.0; d] };
        for j in 0..d {
            let mut up = m.clone();
            let mut dn = m.clone();
            up.params.gamma[j] += h;
            dn.params.gamma[j] -= h;
            g.gamma[j] = (tent_loss(&up, batch).unwrap() - tent_loss(&dn, batch).unwrap()) / (2.0 * h);
            let mut up = m.clone();
            let mut dn = m.clone();
            up.params.beta[j] += h;
            dn.params.beta[j] -= h;
            g.beta[j] = (tent_loss(&up, batch).unwrap() - tent_loss(&dn, batch).unwrap()) / (2.0 * h);
        }
        g
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..20 {
            let m = random_model(&mut rng, 6, 4);
            let batch = random_batch(&mut rng, 8, 6);
            let a = grad_tent(&m, &batch).unwrap();
            let f = finite_difference(&m, &batch, 1e-5);
            for (x, y) in a.gamma.iter().chain(&a.beta).zip(f.gamma.iter().chain(&f.beta)) {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-8);
                assert!(rel <= 1e-5, "analytic {x} vs numeric {y}");
            }
        }
    }

    #[test]
    fn uniform_outputs_are_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = ToyClassifier::new(AdapterParams::identity(4), vec![0.0; 12], vec![0.0; 3]).unwrap();
        let g = grad_tent(&m, &random_batch(&mut rng, 5, 4)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn beta_gradient_is_weights_times_logit_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_model(&mut rng, 5, 3);
        let batch = random_batch(&mut rng, 6, 5);
        // mean logit-gradient computed independently from probabilities
        let mut gz = vec![0.0; 3];
        for x in &batch {
            let p = m.probabilities(x).unwrap();
            let h = entropy(&p).unwrap();
            for k in 0..3 {
                gz[k] += -p[k] * (p[k].ln() + h) / batch.len() as f64;
            }
        }
        let g = grad_tent(&m, &batch).unwrap();
        for j in 0..5 {
            let expect: f64 = (0..3).map(|k| m.weights[j * 3 + k] * gz[k]).sum();
            assert!((g.beta[j] - expect).abs() < 1e-12);
        }
    }

    fn fixture() -> (SyntheticTask, ToyClassifier, Corruptor) {
        let task = SyntheticTask::generate(&TaskConfig::default(), 7).unwrap();
        let model = train_clean(&task, 7).unwrap();
        let c = Corruptor::new(&task, 99);
        (task, model, c)
    }

    fn shifted(task: &SyntheticTask, c: &Corruptor, n: usize, seed: u64, sign: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (xs, ys) = task.sample(n, &mut rng);
        let spec = CorruptionSpec { cause: "rain".into(), kind: CorruptionKind::Shift, severity: 3 };
        let xs = xs
            .iter()
            .map(|x| {
                let y = c.corrupt(x, &spec, 0).unwrap();
                x.iter().zip(&y).map(|(a, b)| a + sign * (b - a)).collect()
            })
            .collect();
        (xs, ys)
    }

    #[test]
    fn confident_batch_leaves_parameters_unchanged() {
        let confident = ToyClassifier::new(
            AdapterParams::identity(2),
            vec![1e4, -1e4, -1e4, 1e4],
            vec![0.0, 0.0],
        )
        .unwrap();
        let cfg = AdaptConfig { recalibrate: false, ..AdaptConfig::default() };
        let out = adapt_tent(&confident, &[vec![1.0, 0.0], vec![0.0, 1.0]], &cfg).unwrap();
        for (a, b) in out.model.params.gamma.iter().zip(&confident.params.gamma) {
            assert!((a - b).abs() <= 1e-9);
        }
        for (a, b) in out.model.params.beta.iter().zip(&confident.params.beta) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn tent_lowers_entropy_and_improves_shifted_accuracy() {
        let (task, model, c) = fixture();
        let (batch, _) = shifted(&task, &c, 64, 5, 1.0);
        let (test_x, test_y) = shifted(&task, &c, 2000, 8, 1.0);
        let out = adapt_tent(&model, &batch, &AdaptConfig::default()).unwrap();
        assert!(out.report.final_loss < out.report.initial_loss);
        assert_eq!(out.model.weights, model.weights);
        assert_eq!(out.model.bias, model.bias);
        let pre = accuracy(&model, &test_x, &test_y).unwrap();
        let post = accuracy(&out.model, &test_x, &test_y).unwrap();
        assert!(post > pre, "post {post} <= pre {pre}");

        // pure entropy descent alone also lowers the objective
        let raw = adapt_tent(&model, &batch, &AdaptConfig { recalibrate: false, ..AdaptConfig::default() }).unwrap();
        assert!(raw.report.final_loss < raw.report.initial_loss);
    }

    #[test]
    fn mixed_causes_underfit() {
        let (task, model, c) = fixture();
        let (pos, _) = shifted(&task, &c, 64, 5, 1.0);
        let (neg, _) = shifted(&task, &c, 64, 6, -1.0);
        let (tp, yp) = shifted(&task, &c, 2000, 8, 1.0);
        let (tn, yn) = shifted(&task, &c, 2000, 9, -1.0);
        let cfg = AdaptConfig::default();
        let mixed: Vec<Vec<f64>> = pos.iter().chain(&neg).cloned().collect();
        let both = adapt_tent(&model, &mixed, &cfg).unwrap().model;
        let only_pos = adapt_tent(&model, &pos, &cfg).unwrap().model;
        let only_neg = adapt_tent(&model, &neg, &cfg).unwrap().model;
        let base_p = accuracy(&model, &tp, &yp).unwrap();
        let base_n = accuracy(&model, &tn, &yn).unwrap();
        let mixed_gain = accuracy(&both, &tp, &yp).unwrap() - base_p + accuracy(&both, &tn, &yn).unwrap() - base_n;
        let separate_gain =
            accuracy(&only_pos, &tp, &yp).unwrap() - base_p + accuracy(&only_neg, &tn, &yn).unwrap() - base_n;
        assert!(mixed_gain < separate_gain, "mixed {mixed_gain} vs separate {separate_gain}");
    }

    #[test]
    fn memo_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_model(&mut rng, 5, 3);
        let batch = random_batch(&mut rng, 6, 5);
        let identity = vec![vec![vec![0.0; 5]; 4]; 6];
        assert!((memo_loss(&m, &batch, &identity).unwrap() - tent_loss(&m, &batch).unwrap()).abs() < 1e-12);

        let cfg = AdaptConfig { method: AdaptMethod::Memo, ..AdaptConfig::default() };
        let aug = memo_augmentations(batch.len(), 5, &cfg);
        for (x, copies) in batch.iter().zip(&aug) {
            let marginal = memo_loss(&m, std::slice::from_ref(x), std::slice::from_ref(copies)).unwrap();
            let mean_each = copies
                .iter()
                .map(|e| {
                    let xa: Vec<f64> = x.iter().zip(e).map(|(a, b)| a + b).collect();
                    entropy(&m.probabilities(&xa).unwrap()).unwrap()
                })
                .sum::<f64>()
                / copies.len() as f64;
            assert!(marginal >= mean_each - 1e-12);
        }
    }

    #[test]
    fn memo_gains_no_more_than_tent() {
        let (task, model, c) = fixture();
        let (batch, _) = shifted(&task, &c, 64, 5, 1.0);
        let (tx, ty) = shifted(&task, &c, 2000, 8, 1.0);
        let cfg = AdaptConfig::default();
        let pre = accuracy(&model, &tx, &ty).unwrap();
        let tent = adapt_tent(&model, &batch, &cfg).unwrap().model;
        let memo = adapt_memo(&model, &batch, &cfg).unwrap().model;
        let tent_gain = accuracy(&tent, &tx, &ty).unwrap() - pre;
        let memo_gain = accuracy(&memo, &tx, &ty).unwrap() - pre;
        assert!(memo_gain <= tent_gain, "memo {memo_gain} vs tent {tent_gain}");
        assert_eq!(memo.weights, model.weights);
    }

    #[test]
    fn divergence_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = random_model(&mut rng, 4, 3);
        let batch = random_batch(&mut rng, 8, 4);
        let cfg = AdaptConfig::default();
        let nan = descend(&m, &cfg, |model| {
            (f64::NAN, ParamGrad { gamma: vec![0.0; model.dim()], beta: vec![0.0; model.dim()] })
        });
        assert!(matches!(nan, Err(AdaptError::Diverged(_))));
        assert!(adapt_tent(&m, &batch, &AdaptConfig { steps: 0, ..AdaptConfig::default() }).is_err());

        // A loss that keeps rising trips the guard after three halvings.
        let cfg = AdaptConfig { steps: 100, ..AdaptConfig::default() };
        let mut calls = 0.0;
        let rising = descend(&m, &cfg, |model| {
            calls += 1.0;
            (calls, ParamGrad { gamma: vec![0.0; model.dim()], beta: vec![0.0; model.dim()] })
        });
        assert!(matches!(rising, Err(AdaptError::Diverged(_))));
        assert_eq!(calls, 13.0);

        // Isolated rises only halve the rate.
        let cfg = AdaptConfig { steps: 30, ..AdaptConfig::default() };
        let mut t = 0;
        let (_, _, halvings) = descend(&m, &cfg, |model| {
            t += 1;
            let loss = if t % 2 == 0 { 1.0 } else { 0.5 };
            (loss, ParamGrad { gamma: vec![0.0; model.dim()], beta: vec![0.0; model.dim()] })
        })
        .unwrap();
        assert_eq!(halvings, 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn loss_bounds_freeze_and_determinism(seed in 0u64..10_000, n in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_model(&mut rng, 5, 4);
            let batch = random_batch(&mut rng, n, 5);
            let loss = tent_loss(&m, &batch).unwrap();
            prop_assert!(loss >= 0.0 && loss <= 4f64.ln() + 1e-12);
            let cfg = AdaptConfig { seed, ..AdaptConfig::default() };
            for method in [AdaptMethod::Tent, AdaptMethod::Memo] {
                let cfg = AdaptConfig { method, steps: 3, ..cfg.clone() };
                let a = adapt(&m, &batch, &cfg).unwrap();
                let b = adapt(&m, &batch, &cfg).unwrap();
                prop_assert_eq!(&a.model, &b.model);
                prop_assert_eq!(&a.model.weights, &m.weights);
                prop_assert_eq!(&a.model.bias, &m.bias);
            }
        }
    }
}
