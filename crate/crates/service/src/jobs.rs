//! Batch jobs driven by TOML files: parser training and evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use facefill_core::checkpoint::{save_parser, Model};
use facefill_core::dataset::{ImageSet, LabeledSet};
use facefill_core::evaluation::{
    evaluate_masks, mask_size_sweep, mask_table, recognition_experiment, recognition_tsv, rows_tsv, Completer,
    IdentityCompleter, Metric, ModelCompleter, NoiseFillCompleter, RandomConvEmbedder, RecognitionSplit, TOP_K,
};
use facefill_core::losses::Stage;
use facefill_core::synthetic::{synthetic_faces, SyntheticConfig};
use facefill_core::training::parser::{train_parser, ParserTrainConfig};
use facefill_core::training::DatasetConfig;
use facefill_core::{Error, Result};
use serde::{Deserialize, Serialize};

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Makes a relative path relative to the config file's directory.
fn anchor(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParserJobConfig {
    /// Labelled dataset with `images/` and `labels/` subdirectories.
    pub dataset: Option<PathBuf>,
    pub synthetic: Option<SyntheticConfig>,
    /// Every `validation_every`-th item is held out for validation.
    pub validation_every: usize,
    pub output_dir: PathBuf,
    pub train: ParserTrainConfig,
}

impl Default for ParserJobConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            synthetic: None,
            validation_every: 5,
            output_dir: PathBuf::from("parser"),
            train: ParserTrainConfig::default(),
        }
    }
}

impl ParserJobConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = read_toml(path)?;
        let base = config_dir(path);
        if let Some(d) = cfg.dataset.as_mut() {
            anchor(&base, d);
        }
        anchor(&base, &mut cfg.output_dir);
        Ok(cfg)
    }

    pub fn load_dataset(&self) -> Result<LabeledSet> {
        match (&self.dataset, &self.synthetic) {
            (Some(p), None) => LabeledSet::load_dir(p),
            (None, Some(s)) => Ok(LabeledSet::from_faces(&synthetic_faces(s)?)),
            (None, None) => Err(Error::Config("dataset not found: no dataset configured".into())),
            (Some(_), Some(_)) => Err(Error::Config("give either dataset or synthetic, not both".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParserJobReport {
    pub checkpoint: PathBuf,
    pub digest: String,
    pub steps: u64,
    pub overall_f_score: f64,
    pub per_class: Vec<Option<f64>>,
}

pub fn run_parser_job(cfg: &ParserJobConfig) -> Result<ParserJobReport> {
    let set = cfg.load_dataset()?;
    let (train, val) = set.split_validation(cfg.validation_every);
    let out = train_parser(&cfg.train, &train, &val)?;
    let digest = save_parser(&cfg.output_dir, &out.parser, out.steps, cfg.train.seed)?;
    let report = ParserJobReport {
        checkpoint: cfg.output_dir.clone(),
        digest,
        steps: out.steps,
        overall_f_score: out.scores.overall,
        per_class: out.scores.per_class,
    };
    let path = cfg.output_dir.join("scores.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&path, json).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub output_dir: PathBuf,
    pub sweep: bool,
    pub recognition: bool,
    pub embedder_dim: usize,
    pub embedder_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            output_dir: PathBuf::from("eval"),
            sweep: true,
            recognition: true,
            embedder_dim: RandomConvEmbedder::DEFAULT_DIM,
            embedder_seed: RandomConvEmbedder::DEFAULT_SEED,
        }
    }
}

impl EvalConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = read_toml(path)?;
        let base = config_dir(path);
        if let Some(p) = cfg.dataset.path.as_mut() {
            anchor(&base, p);
        }
        anchor(&base, &mut cfg.output_dir);
        Ok(cfg)
    }

    pub fn load_dataset(&self) -> Result<ImageSet> {
        match (&self.dataset.path, &self.dataset.synthetic) {
            (Some(p), None) => ImageSet::load_dir(p),
            (None, Some(s)) => Ok(ImageSet::from_faces(&synthetic_faces(s)?)),
            (None, None) => Err(Error::Config("dataset not found: no dataset configured".into())),
            (Some(_), Some(_)) => Err(Error::Config("dataset: give either path or synthetic, not both".into())),
        }
    }
}

/// Identity of an image id: everything before the last `_`, or the whole id.
pub fn identity_key(id: &str) -> &str {
    id.rsplit_once('_').map_or(id, |(k, _)| k)
}

/// Completers for a checkpoint: the model as stored and, for a fully
/// trained model, the same model followed by blending.
pub fn model_completers(model: &Model) -> Vec<ModelCompleter> {
    let mut out = vec![ModelCompleter {
        tag: model.model_tag.clone(),
        generator: model.generator.clone(),
        blend: false,
    }];
    if model.stage == Some(Stage::Three) {
        out.push(ModelCompleter {
            tag: "M5".into(),
            generator: model.generator.clone(),
            blend: true,
        });
    }
    out
}

/// Writes the three per-metric tables, the long-format rows, and optionally
/// the sweep and recognition tables. Returns the written paths.
pub fn run_evaluation(cfg: &EvalConfig, model: Option<&Model>) -> Result<Vec<PathBuf>> {
    let images = cfg.load_dataset()?;
    let embedder = RandomConvEmbedder::new(cfg.embedder_dim, cfg.embedder_seed);
    let models = model.map(model_completers).unwrap_or_default();
    let identity = IdentityCompleter::default();
    let noise = NoiseFillCompleter::default();
    let mut completers: Vec<&dyn Completer> = Vec::new();
    if model.is_none() {
        completers.push(&identity);
    }
    completers.extend(models.iter().map(|m| m as &dyn Completer));
    completers.push(&noise);

    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
    let mut written = Vec::new();
    let mut write = |name: &str, text: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
        written.push(path);
        Ok(())
    };

    let rows = evaluate_masks(&completers, &images, &embedder, cfg.seed)?;
    for metric in Metric::ALL {
        write(&format!("table_{}.tsv", metric.name().to_lowercase()), mask_table(&rows, metric))?;
    }
    write("masks.tsv", rows_tsv(&rows))?;
    if cfg.sweep {
        write("sweep.tsv", rows_tsv(&mask_size_sweep(&completers, &images, &embedder, cfg.seed)?))?;
    }
    if cfg.recognition {
        let mut keys = BTreeMap::new();
        let identities: Vec<usize> = images
            .ids
            .iter()
            .map(|id| {
                let n = keys.len();
                *keys.entry(identity_key(id).to_string()).or_insert(n)
            })
            .collect();
        let split = RecognitionSplit::alternating(&images.images, &identities)?;
        let original = IdentityCompleter { tag: "original".into() };
        let mut variants: Vec<&dyn Completer> = vec![&original, &noise];
        variants.extend(models.iter().map(|m| m as &dyn Completer));
        let table = recognition_experiment(&variants, &split, &embedder, &TOP_K, cfg.seed)?;
        write("recognition.tsv", recognition_tsv(&table))?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_keys() {
        assert_eq!(identity_key("id003_07"), "id003");
        assert_eq!(identity_key("a_b_c"), "a_b");
        assert_eq!(identity_key("plain"), "plain");
    }

    #[test]
    fn job_configs_parse_with_defaults() {
        let cfg: ParserJobConfig = toml::from_str("validation_every = 4\n[synthetic]\nsize = 32\nidentities = 2\nper_identity = 3\nseed = 1\n").unwrap();
        assert_eq!(cfg.validation_every, 4);
        assert_eq!(cfg.train, ParserTrainConfig::default());
        assert!(toml::from_str::<EvalConfig>("nonsense = 1").is_err());
    }
}
