//! Curriculum training of the generator against the two discriminators, with
//! the frozen parser as a semantic regularizer.

pub mod parser;

pub use parser::{f_scores, train_parser, FScores, ParserTrainConfig, ParserTraining};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{write_checkpoint, CheckpointKind, Manifest};
use crate::dataset::ImageSet;
use crate::error::{Error, Result};
use crate::imaging::{apply_affine, AugmentConfig, ImageTensor, CHANNELS};
use crate::losses::{
    d_loss_logits, g_loss_logits, parsing_loss_with_grad, reconstruction_with_grad, LossReport, LossTerms, LossWeights,
    Stage, TermValues,
};
use crate::masking::{fill_noise, sample_training_mask, MaskSpec, Rect};
use crate::networks::{
    crop_batch, local_window, uncrop_batch, Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, LabelMap, Parser,
    Scope,
};
use crate::nn::{Adam, AdamConfig, BnMode, Tensor};
use crate::synthetic::{synthetic_faces, SyntheticConfig};

/// Discriminators are skipped for a step when they already classify more
/// than this fraction of the batch correctly.
pub const D_ACCURACY_THRESHOLD: f64 = 0.8;

pub const LOG_FILE: &str = "train_log.jsonl";

/// Steps per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub stage3_steps: u64,
}

impl CurriculumSchedule {
    pub fn new(stage1_steps: u64, stage2_steps: u64, stage3_steps: u64) -> Result<Self> {
        let s = Self {
            stage1_steps,
            stage2_steps,
            stage3_steps,
        };
        if s.total() == 0 {
            return Err(Error::Config("schedule has no steps".into()));
        }
        Ok(s)
    }

    /// Splits `total` steps 20% / 30% / 50%.
    pub fn from_total(total: u64) -> Result<Self> {
        let s1 = (total as f64 * 0.2).round() as u64;
        let s2 = (total as f64 * 0.3).round() as u64;
        Self::new(s1, s2, total.saturating_sub(s1 + s2))
    }

    pub fn total(&self) -> u64 {
        self.stage1_steps + self.stage2_steps + self.stage3_steps
    }

    /// Stage of the zero-based step `index`.
    pub fn stage_at(&self, index: u64) -> Stage {
        if index < self.stage1_steps {
            Stage::One
        } else if index < self.stage1_steps + self.stage2_steps {
            Stage::Two
        } else {
            Stage::Three
        }
    }

    /// Completed-step counts at which a stage ends.
    pub fn boundaries(&self) -> Vec<u64> {
        let mut b = vec![
            self.stage1_steps,
            self.stage1_steps + self.stage2_steps,
            self.total(),
        ];
        b.retain(|&s| s > 0);
        b.dedup();
        b
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Split 20/30/50 when the per-stage counts are not given.
    pub total_steps: Option<u64>,
    pub stage1_steps: Option<u64>,
    pub stage2_steps: Option<u64>,
    pub stage3_steps: Option<u64>,
}

impl ScheduleConfig {
    pub fn resolve(&self) -> Result<CurriculumSchedule> {
        match (self.stage1_steps, self.stage2_steps, self.stage3_steps, self.total_steps) {
            (Some(a), Some(b), Some(c), total) => {
                let s = CurriculumSchedule::new(a, b, c)?;
                if total.is_some_and(|t| t != s.total()) {
                    return Err(Error::Config("total_steps disagrees with the per-stage counts".into()));
                }
                Ok(s)
            }
            (None, None, None, Some(t)) => CurriculumSchedule::from_total(t),
            _ => Err(Error::Config(
                "schedule needs either total_steps or all of stage1_steps, stage2_steps, stage3_steps".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory of face images.
    pub path: Option<PathBuf>,
    /// Generate faces instead of reading them.
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Channel widths are the VGG widths divided by this.
    pub width_divisor: usize,
    pub bottleneck_dim: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            width_divisor: 8,
            bottleneck_dim: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub image_size: usize,
    pub mask_size: usize,
    /// Side of the local discriminator's window.
    pub local_size: usize,
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub weights: LossWeights,
    pub optimizer: AdamConfig,
    pub generator: GeneratorConfig,
    pub discriminator_width: usize,
    pub parser_checkpoint: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
    /// Extra checkpoint every this many steps; 0 for stage boundaries only.
    pub checkpoint_every: u64,
    pub augment: AugmentConfig,
    pub d_accuracy_threshold: f64,
    /// Defaults to the conventional tag for the final stage reached.
    pub model_tag: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small settings that train on a laptop CPU.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            image_size: 64,
            mask_size: 32,
            local_size: 32,
            batch_size: 8,
            schedule: ScheduleConfig {
                total_steps: Some(1000),
                ..Default::default()
            },
            weights: LossWeights::canonical(),
            optimizer: AdamConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator_width: 8,
            parser_checkpoint: None,
            checkpoint_dir: PathBuf::from("checkpoints"),
            checkpoint_every: 0,
            augment: AugmentConfig::canonical(),
            d_accuracy_threshold: D_ACCURACY_THRESHOLD,
            model_tag: None,
        }
    }

    /// Full-size settings: 128 px faces, 64 px masks, VGG widths.
    pub fn canonical() -> Self {
        Self {
            image_size: 128,
            mask_size: 64,
            local_size: 64,
            batch_size: 64,
            generator: GeneratorConfig {
                width_divisor: 1,
                bottleneck_dim: 2048,
            },
            discriminator_width: 64,
            ..Self::desk()
        }
    }

    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: TrainConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.dataset.path.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.parser_checkpoint.as_mut() {
            resolve(p);
        }
        resolve(&mut cfg.checkpoint_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<CurriculumSchedule> {
        self.weights.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.mask_size == 0 || self.mask_size > self.image_size {
            return Err(Error::Config(format!(
                "mask_size {} must be in 1..={}",
                self.mask_size, self.image_size
            )));
        }
        if self.local_size > self.image_size {
            return Err(Error::Config("local_size exceeds image_size".into()));
        }
        if !(0.0..=1.0).contains(&self.d_accuracy_threshold) {
            return Err(Error::Config("d_accuracy_threshold must be in [0, 1]".into()));
        }
        self.schedule.resolve()
    }

    pub fn load_dataset(&self) -> Result<ImageSet> {
        let set = match (&self.dataset.path, &self.dataset.synthetic) {
            (Some(p), None) => ImageSet::load_dir(p)?,
            (None, Some(s)) => ImageSet::from_faces(&synthetic_faces(s)?),
            (None, None) => return Err(Error::Config("dataset not found: no dataset configured".into())),
            (Some(_), Some(_)) => return Err(Error::Config("dataset: give either path or synthetic, not both".into())),
        };
        if set.image_size() != self.image_size {
            return Err(Error::Config(format!(
                "dataset images are {} px, config expects {}",
                set.image_size(),
                self.image_size
            )));
        }
        Ok(set)
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec::scaled(self.image_size, self.generator.width_divisor, self.generator.bottleneck_dim)
    }

    pub fn discriminator_spec(&self, scope: Scope) -> DiscriminatorSpec {
        let size = match scope {
            Scope::Local => self.local_size,
            Scope::Global => self.image_size,
        };
        DiscriminatorSpec::new(scope, size, self.discriminator_width)
    }
}

/// Conventional tag for a model trained through `stage`.
pub fn default_model_tag(stage: Stage) -> &'static str {
    match stage {
        Stage::One => "M1",
        Stage::Two => "M2",
        Stage::Three => "M4",
    }
}

/// `false` when the discriminator is already too strong on the current batch.
pub fn should_update_discriminator(accuracy: f64, threshold: f64) -> bool {
    accuracy <= threshold
}

/// One training-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: Stage,
    pub l_r: f64,
    pub l_a1: f64,
    pub l_a2: f64,
    pub l_p: f64,
    pub total: f64,
    pub d_local_acc: Option<f64>,
    pub d_local_updated: bool,
    pub d_global_acc: Option<f64>,
    pub d_global_updated: bool,
}

/// Parser outputs on the unmasked training images, keyed by image id and
/// tied to the parser that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsingTargets {
    pub parser_digest: String,
    pub maps: BTreeMap<String, LabelMap>,
}

/// Fills the store, reusing `previous` entries when the parser is unchanged.
/// Returns the store and how many maps were computed.
pub fn cache_parsing_targets(
    parser: &Parser,
    images: &ImageSet,
    previous: Option<ParsingTargets>,
) -> Result<(ParsingTargets, usize)> {
    if !parser.is_frozen() {
        return Err(Error::Config("parsing targets need a frozen parser".into()));
    }
    let digest = parser.digest();
    let mut maps = match previous {
        Some(p) if p.parser_digest == digest => p.maps,
        _ => BTreeMap::new(),
    };
    let mut computed = 0;
    for (id, img) in images.ids.iter().zip(&images.images) {
        if maps.contains_key(id) {
            continue;
        }
        maps.insert(id.clone(), parser.parse(img)?);
        computed += 1;
    }
    Ok((
        ParsingTargets {
            parser_digest: digest,
            maps,
        },
        computed,
    ))
}

/// A prepared training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub originals: Tensor,
    pub masks: Vec<MaskSpec>,
    pub windows: Vec<Rect>,
    pub targets: Vec<LabelMap>,
}

/// Adversarial part of the generator objective and its gradient with respect
/// to the generated images. The local term only ever sees the crop windows,
/// so its gradient outside them is exactly zero.
pub fn adversarial_generator_gradient(
    d_local: &mut Discriminator,
    d_global: &mut Discriminator,
    generated: &Tensor,
    windows: &[Rect],
    terms: LossTerms,
    weights: &LossWeights,
) -> Result<(f64, f64, Tensor)> {
    let mut grad = Tensor::zeros(generated.shape());
    let mut l_a1 = 0.0;
    let mut l_a2 = 0.0;
    if terms.local {
        let crops = crop_batch(generated, windows);
        let logits = d_local.forward_logits(&crops, BnMode::Batch)?;
        let (loss, g) = g_loss_logits(&logits, weights.lambda1);
        let gc = d_local.backward_logits(&g, false);
        grad.add_assign(&uncrop_batch(&gc, windows, generated.shape()));
        l_a1 = loss;
    }
    if terms.global {
        let logits = d_global.forward_logits(generated, BnMode::Batch)?;
        let (loss, g) = g_loss_logits(&logits, weights.lambda2);
        grad.add_assign(&d_global.backward_logits(&g, false));
        l_a2 = loss;
    }
    Ok((l_a1, l_a2, grad))
}

/// One discriminator step on real and fake batches: returns (loss, accuracy,
/// updated). Gradients are always computed; they are applied only when the
/// discriminator is not already too strong.
fn discriminator_step(
    d: &mut Discriminator,
    opt: &mut Adam,
    real: &Tensor,
    fake: &Tensor,
    threshold: f64,
) -> Result<(f64, f64, bool)> {
    let real_logits = d.forward_logits(real, BnMode::Batch)?;
    // the real-half gradient does not depend on the fake logits
    let placeholder = vec![0.0; real_logits.len()];
    d.accumulate_logit_grads(&d_loss_logits(&real_logits, &placeholder).grad_real);
    let fake_logits = d.forward_logits(fake, BnMode::Batch)?;
    let stats = d_loss_logits(&real_logits, &fake_logits);
    d.accumulate_logit_grads(&stats.grad_fake);
    let update = should_update_discriminator(stats.accuracy, threshold);
    if update {
        opt.step(d.net_mut().trainable_mut());
    } else {
        d.net_mut().zero_grad();
    }
    Ok((stats.loss, stats.accuracy, update))
}

/// Fixed noise-filled inputs for tracking masked-region error.
#[derive(Debug, Clone)]
pub struct Probe {
    pub inputs: Tensor,
    pub originals: Tensor,
    pub masks: Vec<MaskSpec>,
}

impl Probe {
    pub fn new(images: &ImageSet, mask_size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = Vec::new();
        let mut masks = Vec::new();
        for img in &images.images {
            let mask = sample_training_mask(&mut rng, img.height(), mask_size)?;
            inputs.push(fill_noise(img, &mask, &mut rng)?);
            masks.push(mask);
        }
        Ok(Self {
            inputs: Tensor::from_images(&inputs.iter().collect::<Vec<_>>())?,
            originals: Tensor::from_images(&images.images.iter().collect::<Vec<_>>())?,
            masks,
        })
    }
}

/// Mean squared error over the masked pixels of the probe.
pub fn masked_mse(generator: &Generator, probe: &Probe) -> Result<f64> {
    let out = generator.infer(&probe.inputs)?;
    let [_, c, h, w] = out.shape();
    let plane = h * w;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (b, mask) in probe.masks.iter().enumerate() {
        for (p, _) in mask.bitmap().iter().enumerate().filter(|(_, &m)| m) {
            for ch in 0..c {
                let i = (b * c + ch) * plane + p;
                sum += (out.data()[i] as f64 - probe.originals.data()[i] as f64).powi(2);
            }
            count += c;
        }
    }
    Ok(sum / count.max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoints: Vec<PathBuf>,
    pub records: Vec<StepRecord>,
}

pub struct Trainer {
    config: TrainConfig,
    schedule: CurriculumSchedule,
    images: ImageSet,
    generator: Generator,
    d_local: Discriminator,
    d_global: Discriminator,
    parser: Option<Parser>,
    targets: Option<ParsingTargets>,
    opt_g: Adam,
    opt_local: Adam,
    opt_global: Adam,
    rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
    step: u64,
    records: Vec<StepRecord>,
    log: Option<std::io::BufWriter<std::fs::File>>,
}

impl Trainer {
    /// Builds networks and optimizers. A parser is required whenever the
    /// schedule reaches stage 3.
    pub fn new(config: TrainConfig, images: ImageSet, parser: Option<Parser>) -> Result<Self> {
        let schedule = config.validate()?;
        if images.is_empty() {
            return Err(Error::Config("dataset not found: training set is empty".into()));
        }
        if images.image_size() != config.image_size {
            return Err(Error::Config(format!(
                "dataset images are {} px, config expects {}",
                images.image_size(),
                config.image_size
            )));
        }
        let parser = parser.map(|mut p| {
            p.set_frozen(true);
            p
        });
        if schedule.stage3_steps > 0 {
            let p = parser
                .as_ref()
                .ok_or_else(|| Error::Config("stage 3 needs a parser checkpoint".into()))?;
            if p.spec().input_size != config.image_size {
                return Err(Error::Config(format!(
                    "parser expects {} px images, training uses {}",
                    p.spec().input_size,
                    config.image_size
                )));
            }
        }
        let seed = config.seed;
        let generator = Generator::new(config.generator_spec(), seed)?;
        let d_local = Discriminator::new(config.discriminator_spec(Scope::Local), seed.wrapping_add(1))?;
        let d_global = Discriminator::new(config.discriminator_spec(Scope::Global), seed.wrapping_add(2))?;
        let targets = match &parser {
            Some(p) if schedule.stage3_steps > 0 => Some(cache_parsing_targets(p, &images, None)?.0),
            _ => None,
        };
        Ok(Self {
            opt_g: Adam::new(config.optimizer),
            opt_local: Adam::new(config.optimizer),
            opt_global: Adam::new(config.optimizer),
            rng: ChaCha8Rng::seed_from_u64(seed),
            augment_rng: ChaCha8Rng::seed_from_u64(config.augment.seed ^ seed),
            schedule,
            images,
            generator,
            d_local,
            d_global,
            parser,
            targets,
            step: 0,
            records: Vec::new(),
            log: None,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schedule(&self) -> &CurriculumSchedule {
        &self.schedule
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn d_local(&self) -> &Discriminator {
        &self.d_local
    }

    pub fn d_global(&self) -> &Discriminator {
        &self.d_global
    }

    pub fn parser(&self) -> Option<&Parser> {
        self.parser.as_ref()
    }

    pub fn parsing_targets(&self) -> Option<&ParsingTargets> {
        self.targets.as_ref()
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn images(&self) -> &ImageSet {
        &self.images
    }

    /// Appends one JSON line per step to `path` from now on.
    pub fn log_to(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.log = Some(std::io::BufWriter::new(file));
        Ok(())
    }

    /// Draws a batch: augmented images, fresh training masks and noise.
    pub fn sample_batch(&mut self, with_targets: bool) -> Result<Batch> {
        let size = self.config.image_size;
        let mut inputs = Vec::with_capacity(self.config.batch_size);
        let mut originals = Vec::with_capacity(self.config.batch_size);
        let mut masks = Vec::with_capacity(self.config.batch_size);
        let mut windows = Vec::with_capacity(self.config.batch_size);
        let mut targets = Vec::new();
        for _ in 0..self.config.batch_size {
            let idx = self.rng.random_range(0..self.images.len());
            let params = self.config.augment.sample(&mut self.augment_rng);
            let img = apply_affine(&self.images.images[idx], &params);
            if with_targets {
                let store = self
                    .targets
                    .as_ref()
                    .ok_or_else(|| Error::Config("parsing targets were not prepared".into()))?;
                let map = &store.maps[&self.images.ids[idx]];
                targets.push(map.warped(&params));
            }
            let mask = sample_training_mask(&mut self.rng, size, self.config.mask_size)?;
            inputs.push(fill_noise(&img, &mask, &mut self.rng)?);
            windows.push(local_window(&mask, self.config.local_size)?);
            masks.push(mask);
            originals.push(img);
        }
        Ok(Batch {
            inputs: Tensor::from_images(&inputs.iter().collect::<Vec<_>>())?,
            originals: Tensor::from_images(&originals.iter().collect::<Vec<_>>())?,
            masks,
            windows,
            targets,
        })
    }

    /// Runs one optimization step of the current stage.
    pub fn step(&mut self) -> Result<StepRecord> {
        let stage = self.schedule.stage_at(self.step);
        let terms = stage.terms();
        let batch = self.sample_batch(terms.parsing)?;
        let threshold = self.config.d_accuracy_threshold;
        let weights = self.config.weights;

        let generated = self.generator.forward(&batch.inputs)?;
        let (l_r, mut grad) = reconstruction_with_grad(&generated, &batch.originals, 1.0);

        let mut d_local_acc = None;
        let mut d_local_updated = false;
        if terms.local {
            let real = crop_batch(&batch.originals, &batch.windows);
            let fake = crop_batch(&generated, &batch.windows);
            let (_, acc, updated) = discriminator_step(&mut self.d_local, &mut self.opt_local, &real, &fake, threshold)?;
            d_local_acc = Some(acc);
            d_local_updated = updated;
        }
        let mut d_global_acc = None;
        let mut d_global_updated = false;
        if terms.global {
            let (_, acc, updated) = discriminator_step(
                &mut self.d_global,
                &mut self.opt_global,
                &batch.originals,
                &generated,
                threshold,
            )?;
            d_global_acc = Some(acc);
            d_global_updated = updated;
        }
        let (l_a1, l_a2, adv_grad) = adversarial_generator_gradient(
            &mut self.d_local,
            &mut self.d_global,
            &generated,
            &batch.windows,
            terms,
            &weights,
        )?;
        grad.add_assign(&adv_grad);

        let mut l_p = 0.0;
        if terms.parsing {
            let parser = self
                .parser
                .as_mut()
                .ok_or_else(|| Error::Config("stage 3 needs a parser checkpoint".into()))?;
            let logits = parser.forward(&generated)?;
            let targets: Vec<&LabelMap> = batch.targets.iter().collect();
            let (loss, g) = parsing_loss_with_grad(&logits, &targets)?;
            let lambda = weights.lambda3 as f32;
            let g = g.map(|v| v * lambda);
            let gx = parser.backward(g, true).expect("input gradient requested");
            grad.add_assign(&gx);
            l_p = loss;
        }

        let values = TermValues { l_r, l_a1, l_a2, l_p };
        let report = LossReport::new(values, &weights, stage);
        self.step += 1;
        if !report.is_finite() || !generated.is_finite() {
            let path = self.save_checkpoint(&format!("diagnostic-step-{:08}", self.step), stage)?;
            tracing::error!("non-finite loss at step {}, state saved to {}", self.step, path.display());
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("{report:?}"),
            });
        }
        self.generator.backward(grad);
        self.opt_g.step(self.generator.net_mut().trainable_mut());

        let record = StepRecord {
            step: self.step,
            stage,
            l_r: report.l_r,
            l_a1: report.l_a1,
            l_a2: report.l_a2,
            l_p: report.l_p,
            total: report.total,
            d_local_acc,
            d_local_updated,
            d_global_acc,
            d_global_updated,
        };
        if let Some(log) = self.log.as_mut() {
            let line = serde_json::to_string(&record).expect("records serialize");
            writeln!(log, "{line}").map_err(|e| Error::io(LOG_FILE, e))?;
        }
        self.records.push(record.clone());
        Ok(record)
    }

    /// Writes a completion checkpoint under the configured directory.
    pub fn save_checkpoint(&mut self, name: &str, stage: Stage) -> Result<PathBuf> {
        if let Some(log) = self.log.as_mut() {
            log.flush().map_err(|e| Error::io(LOG_FILE, e))?;
        }
        let tag = self
            .config
            .model_tag
            .clone()
            .unwrap_or_else(|| default_model_tag(stage).to_string());
        let mut m = Manifest::new(CheckpointKind::Completion, tag, self.step, self.config.seed);
        m.stage = Some(stage);
        m.weights = Some(self.config.weights);
        m.generator = Some(self.generator.spec().clone());
        m.local_discriminator = Some(self.d_local.spec().clone());
        m.global_discriminator = Some(self.d_global.spec().clone());
        let mut nets = vec![
            ("generator", self.generator.net()),
            ("d_local", self.d_local.net()),
            ("d_global", self.d_global.net()),
        ];
        if let Some(p) = &self.parser {
            m.parser = Some(p.spec().clone());
            m.parser_digest = Some(p.digest());
            nets.push(("parser", p.net()));
        }
        let dir = self.config.checkpoint_dir.join(name);
        write_checkpoint(&dir, &m, &nets)?;
        let latest = self.config.checkpoint_dir.join("latest");
        std::fs::write(&latest, name).map_err(|e| Error::io(&latest, e))?;
        tracing::info!("checkpoint {} at step {}", dir.display(), self.step);
        Ok(dir)
    }

    /// Trains through the whole schedule, checkpointing at every stage
    /// boundary and every `checkpoint_every` steps.
    pub fn run(&mut self) -> Result<TrainOutcome> {
        let boundaries = self.schedule.boundaries();
        let mut checkpoints = Vec::new();
        while self.step < self.schedule.total() {
            let record = self.step()?;
            let every = self.config.checkpoint_every;
            if boundaries.contains(&record.step) || (every > 0 && record.step % every == 0) {
                checkpoints.push(self.save_checkpoint(&format!("step-{:08}", record.step), record.stage)?);
            }
            if record.step % 100 == 0 {
                tracing::info!(
                    "step {} stage {} l_r {:.5} total {:.5}",
                    record.step,
                    record.stage,
                    record.l_r,
                    record.total
                );
            }
        }
        if let Some(log) = self.log.as_mut() {
            log.flush().map_err(|e| Error::io(LOG_FILE, e))?;
        }
        Ok(TrainOutcome {
            checkpoints,
            records: self.records.clone(),
        })
    }
}

/// Loads the dataset and parser named by `config`, then trains, logging to
/// `train_log.jsonl` in the checkpoint directory.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    let images = config.load_dataset()?;
    let parser = match &config.parser_checkpoint {
        Some(dir) => Some(crate::checkpoint::Checkpoint::open(dir)?.parser()?),
        None => None,
    };
    let mut trainer = Trainer::new(config.clone(), images, parser)?;
    trainer.log_to(config.checkpoint_dir.join(LOG_FILE))?;
    trainer.run()
}

/// Converts a probe batch back to images, e.g. for inspection.
pub fn tensor_images(t: &Tensor) -> Result<Vec<ImageTensor>> {
    debug_assert_eq!(t.channels(), CHANNELS);
    (0..t.batch()).map(|i| t.to_image(i)).collect()
}
