//! Supervised training of the face parser and its f-score report.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledSet;
use crate::error::{Error, Result};
use crate::imaging::{apply_affine, AugmentConfig};
use crate::losses::parsing_loss_with_grad;
use crate::networks::{LabelMap, Parser, ParserSpec, NUM_LABELS};
use crate::nn::{Adam, AdamConfig, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParserTrainConfig {
    pub seed: u64,
    pub base_width: usize,
    pub depth: usize,
    pub max_steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Validation f-score is measured every this many steps.
    pub eval_every: u64,
    /// Stop after this many evaluations without improvement.
    pub patience: usize,
    pub augment: AugmentConfig,
}

impl Default for ParserTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            base_width: 16,
            depth: 3,
            max_steps: 1500,
            batch_size: 8,
            optimizer: AdamConfig {
                learning_rate: 1e-3,
                beta1: 0.9,
                ..AdamConfig::default()
            },
            eval_every: 100,
            patience: 4,
            augment: AugmentConfig {
                max_rotation: 5.0,
                max_shift: 2,
                scale_min: 0.95,
                scale_max: 1.05,
                ..AugmentConfig::canonical()
            },
        }
    }
}

/// Pixel f-scores. `per_class[k]` is `None` when class `k` appears in neither
/// prediction nor ground truth. `overall` pools the counts of every class
/// except background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FScores {
    pub per_class: Vec<Option<f64>>,
    pub overall: f64,
}

pub fn f_scores(predicted: &[LabelMap], truth: &[LabelMap]) -> Result<FScores> {
    if predicted.len() != truth.len() {
        return Err(Error::Argument("prediction and truth counts differ".into()));
    }
    let mut tp = [0u64; NUM_LABELS];
    let mut fp = [0u64; NUM_LABELS];
    let mut fn_ = [0u64; NUM_LABELS];
    for (p, t) in predicted.iter().zip(truth) {
        if p.dims() != t.dims() {
            return Err(Error::Shape(format!("{:?} prediction for {:?} truth", p.dims(), t.dims())));
        }
        for (&a, &b) in p.labels().iter().zip(t.labels()) {
            if a == b {
                tp[a as usize] += 1;
            } else {
                fp[a as usize] += 1;
                fn_[b as usize] += 1;
            }
        }
    }
    let f = |tp: u64, fp: u64, fn_: u64| {
        let denom = 2 * tp + fp + fn_;
        (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
    };
    let per_class = (0..NUM_LABELS).map(|k| f(tp[k], fp[k], fn_[k])).collect();
    let sum = |c: &[u64; NUM_LABELS]| c[1..].iter().sum::<u64>();
    let overall = f(sum(&tp), sum(&fp), sum(&fn_)).unwrap_or(1.0);
    Ok(FScores { per_class, overall })
}

#[derive(Debug, Clone)]
pub struct ParserTraining {
    /// The best parser by validation f-score, frozen.
    pub parser: Parser,
    pub scores: FScores,
    /// `(step, training loss, validation overall f-score)` per evaluation.
    pub history: Vec<(u64, f64, f64)>,
    pub steps: u64,
}

fn predict(parser: &Parser, set: &LabeledSet) -> Result<Vec<LabelMap>> {
    set.images.iter().map(|img| parser.parse(img)).collect()
}

/// Trains a lightweight parser with pixel-wise softmax loss until the
/// validation f-score stops improving.
pub fn train_parser(cfg: &ParserTrainConfig, train: &LabeledSet, val: &LabeledSet) -> Result<ParserTraining> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("dataset not found: parser training and validation sets must be non-empty".into()));
    }
    let size = train.images[0].height();
    let mut parser = Parser::new(ParserSpec::lightweight(size, cfg.base_width, cfg.depth), cfg.seed)?;
    parser.set_frozen(false);
    let mut opt = Adam::new(cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(f64, Parser)> = None;
    let mut history = Vec::new();
    let mut stale = 0;
    let mut running = 0.0;
    let mut step = 0;
    while step < cfg.max_steps {
        let mut images = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let i = rng.random_range(0..train.len());
            let params = cfg.augment.sample(&mut rng);
            images.push(apply_affine(&train.images[i], &params));
            labels.push(train.labels[i].warped(&params));
        }
        let x = Tensor::from_images(&images.iter().collect::<Vec<_>>())?;
        let logits = parser.forward(&x)?;
        let (loss, grad) = parsing_loss_with_grad(&logits, &labels.iter().collect::<Vec<_>>())?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: "parser loss".into(),
            });
        }
        parser.backward(grad, false);
        opt.step(parser.net_mut().trainable_mut());
        running = if step == 0 { loss } else { 0.9 * running + 0.1 * loss };
        step += 1;

        if step % cfg.eval_every.max(1) == 0 || step == cfg.max_steps {
            let f = f_scores(&predict(&parser, val)?, &val.labels)?.overall;
            history.push((step, running, f));
            tracing::info!("parser step {step} loss {running:.4} val f-score {f:.4}");
            if best.as_ref().is_none_or(|(b, _)| f > b + 1e-3) {
                best = Some((f, parser.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    let (_, mut parser) = best.expect("at least one evaluation ran");
    parser.set_frozen(true);
    let scores = f_scores(&predict(&parser, val)?, &val.labels)?;
    Ok(ParserTraining {
        parser,
        scores,
        history,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f_score_counts() {
        let truth = LabelMap::new(1, 4, vec![0, 1, 1, 2]).unwrap();
        let pred = LabelMap::new(1, 4, vec![0, 1, 2, 2]).unwrap();
        let s = f_scores(&[pred], &[truth.clone()]).unwrap();
        // class 1: tp 1, fn 1 -> 2/3; class 2: tp 1, fp 1 -> 2/3
        assert!((s.per_class[1].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.per_class[2].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.per_class[5], None);
        assert!((s.overall - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f_scores(&[truth.clone()], &[truth]).unwrap().overall, 1.0);
    }
}
