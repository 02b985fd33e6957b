//! Reconstruction, adversarial and parsing objectives and their weighted sum.
//!
//! The scalar functions take probabilities and match the textbook formulas.
//! Training goes through the `*_logits` variants, which work on raw
//! discriminator outputs so that `log σ` never underflows.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::imaging::ImageTensor;
use crate::networks::{softmax_labels, LabelMap};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Local adversarial term.
    pub lambda1: f64,
    /// Global adversarial term.
    pub lambda2: f64,
    /// Parsing term.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::canonical()
    }
}

impl LossWeights {
    pub fn canonical() -> Self {
        Self {
            lambda1: 300.0,
            lambda2: 300.0,
            lambda3: 0.005,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Curriculum stage: 1 trains reconstruction only, 2 adds the local
/// adversarial term, 3 adds the global adversarial and parsing terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    One,
    Two,
    Three,
}

impl TryFrom<u8> for Stage {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            3 => Ok(Stage::Three),
            _ => Err(Error::Argument(format!("stage must be 1, 2 or 3, got {v}"))),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s.number()
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::One, Stage::Two, Stage::Three];

    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
        }
    }

    pub fn terms(self) -> LossTerms {
        LossTerms {
            local: self >= Stage::Two,
            global: self == Stage::Three,
            parsing: self == Stage::Three,
        }
    }
}

/// Which optional terms are switched on. Reconstruction is always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub local: bool,
    pub global: bool,
    pub parsing: bool,
}

/// Raw (unweighted) term values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub l_r: f64,
    pub l_a1: f64,
    pub l_a2: f64,
    pub l_p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stage: Stage,
    pub l_r: f64,
    pub l_a1: f64,
    pub l_a2: f64,
    pub l_p: f64,
    pub total: f64,
}

impl LossReport {
    /// Disabled terms are reported as zero.
    pub fn new(values: TermValues, weights: &LossWeights, stage: Stage) -> Self {
        let on = stage.terms();
        let gate = |enabled: bool, v: f64| if enabled { v } else { 0.0 };
        Self {
            stage,
            l_r: values.l_r,
            l_a1: gate(on.local, values.l_a1),
            l_a2: gate(on.global, values.l_a2),
            l_p: gate(on.parsing, values.l_p),
            total: total_loss(&values, weights, stage),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_r, self.l_a1, self.l_a2, self.l_p, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Weighted sum of the terms enabled at `stage`. Disabled terms are skipped,
/// not multiplied by zero, so a non-finite disabled term cannot leak in.
pub fn total_loss(values: &TermValues, weights: &LossWeights, stage: Stage) -> f64 {
    let on = stage.terms();
    let mut total = values.l_r;
    if on.local {
        total += weights.lambda1 * values.l_a1;
    }
    if on.global {
        total += weights.lambda2 * values.l_a2;
    }
    if on.parsing {
        total += weights.lambda3 * values.l_p;
    }
    total
}

/// Mean squared difference over every pixel and channel.
pub fn reconstruction_loss(generated: &ImageTensor, original: &ImageTensor) -> Result<f64> {
    ensure_shape!(
        generated.same_shape(original),
        "reconstruction loss on {:?} vs {:?}",
        generated.dims(),
        original.dims()
    );
    let a = generated.as_slice();
    let b = original.as_slice();
    let sum: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.len() as f64)
}

fn check_probability(p: f64, what: &str) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} must lie strictly inside (0, 1), got {p}")))
    }
}

/// `−[ln d_real + ln(1 − d_fake)]`, the negated value function the
/// discriminator minimizes.
pub fn adversarial_d_loss(d_real: f64, d_fake: f64) -> Result<f64> {
    check_probability(d_real, "d_real")?;
    check_probability(d_fake, "d_fake")?;
    Ok(-(d_real.ln() + (-d_fake).ln_1p()))
}

/// Batch mean of [`adversarial_d_loss`].
pub fn adversarial_d_loss_batch(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    if d_real.len() != d_fake.len() || d_real.is_empty() {
        return Err(Error::Argument("real and fake batches must be non-empty and equal in size".into()));
    }
    let mut sum = 0.0;
    for (&r, &f) in d_real.iter().zip(d_fake) {
        sum += adversarial_d_loss(r, f)?;
    }
    Ok(sum / d_real.len() as f64)
}

/// Non-saturating generator objective `−ln d_fake`.
pub fn adversarial_g_loss(d_fake: f64) -> Result<f64> {
    check_probability(d_fake, "d_fake")?;
    Ok(-d_fake.ln())
}

/// Mean pixel-wise cross-entropy between `softmax(logits)` and the target
/// labels. `logits` is `[1, L, H, W]`.
pub fn parsing_loss(logits: &Tensor, target: &LabelMap) -> Result<f64> {
    Ok(parsing_loss_with_grad(logits, &[target])?.0)
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Discriminator loss on raw logits with its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorLoss {
    pub loss: f64,
    pub grad_real: Vec<f32>,
    pub grad_fake: Vec<f32>,
    /// Fraction of the batch classified correctly: real above 0.5, fake below.
    pub accuracy: f64,
}

pub fn d_loss_logits(real: &[f32], fake: &[f32]) -> DiscriminatorLoss {
    assert_eq!(real.len(), fake.len());
    let n = real.len() as f64;
    let mut loss = 0.0;
    let mut correct = 0usize;
    let grad_real = real
        .iter()
        .map(|&l| {
            let l = l as f64;
            loss += softplus(-l);
            correct += (l > 0.0) as usize;
            ((sigmoid64(l) - 1.0) / n) as f32
        })
        .collect();
    let grad_fake = fake
        .iter()
        .map(|&l| {
            let l = l as f64;
            loss += softplus(l);
            correct += (l < 0.0) as usize;
            (sigmoid64(l) / n) as f32
        })
        .collect();
    DiscriminatorLoss {
        loss: loss / n,
        grad_real,
        grad_fake,
        accuracy: correct as f64 / (2.0 * n),
    }
}

/// Non-saturating generator loss on raw logits, gradient scaled by `weight`.
pub fn g_loss_logits(fake: &[f32], weight: f64) -> (f64, Vec<f32>) {
    let n = fake.len() as f64;
    let mut loss = 0.0;
    let grad = fake
        .iter()
        .map(|&l| {
            let l = l as f64;
            loss += softplus(-l);
            (weight * (sigmoid64(l) - 1.0) / n) as f32
        })
        .collect();
    (loss / n, grad)
}

/// Mean squared error over the whole batch, with the gradient scaled by `weight`.
pub fn reconstruction_with_grad(generated: &Tensor, original: &Tensor, weight: f64) -> (f64, Tensor) {
    assert_eq!(generated.shape(), original.shape());
    let n = generated.numel() as f64;
    let mut sum = 0.0;
    let grad = generated
        .data()
        .iter()
        .zip(original.data())
        .map(|(&g, &o)| {
            let d = g as f64 - o as f64;
            sum += d * d;
            (weight * 2.0 * d / n) as f32
        })
        .collect();
    (sum / n, Tensor::from_vec(generated.shape(), grad))
}

/// Mean cross-entropy over all pixels of all batch items; the gradient with
/// respect to the logits is `(softmax − onehot) / pixels`.
pub fn parsing_loss_with_grad(logits: &Tensor, targets: &[&LabelMap]) -> Result<(f64, Tensor)> {
    let [n, l, h, w] = logits.shape();
    ensure_shape!(n == targets.len(), "{n} logit maps for {} targets", targets.len());
    for t in targets {
        ensure_shape!(t.dims() == (h, w), "target {:?} for {h}x{w} logits", t.dims());
        if let Some(&bad) = t.labels().iter().find(|&&v| v as usize >= l) {
            return Err(Error::Domain(format!("label {bad} outside 0..{l}")));
        }
    }
    let probs = softmax_labels(logits);
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut loss = 0.0;
    let mut grad: Vec<f32> = probs.iter().map(|&p| (p / count) as f32).collect();
    for (b, t) in targets.iter().enumerate() {
        for (p, &label) in t.labels().iter().enumerate() {
            let idx = (b * l + label as usize) * plane + p;
            // log-softmax directly, so saturated wrong logits give a finite large loss
            let d = logits.data();
            let max = (0..l).map(|k| d[(b * l + k) * plane + p]).fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = max
                + (0..l)
                    .map(|k| (d[(b * l + k) * plane + p] as f64 - max).exp())
                    .sum::<f64>()
                    .ln();
            loss += lse - d[idx] as f64;
            grad[idx] = ((probs[idx] - 1.0) / count) as f32;
        }
    }
    Ok((loss / count, Tensor::from_vec(logits.shape(), grad)))
}
