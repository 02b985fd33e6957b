#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use facefill_core::checkpoint::save_parser;
use facefill_core::imaging::AugmentConfig;
use facefill_core::networks::{Parser, ParserSpec};
use facefill_core::synthetic::SyntheticConfig;
use facefill_core::training::{train, ScheduleConfig, TrainConfig};

pub const SIZE: usize = 64;

pub struct Fixture {
    pub root: PathBuf,
    pub parser_dir: PathBuf,
    pub model_dir: PathBuf,
    pub no_parser_dir: PathBuf,
}

pub fn tiny_config(root: &Path, name: &str, parser: Option<&Path>) -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.seed = 4;
    cfg.batch_size = 2;
    cfg.dataset.synthetic = Some(SyntheticConfig::new(SIZE, 2, 2, 9));
    cfg.augment = AugmentConfig::disabled();
    cfg.schedule = ScheduleConfig {
        total_steps: None,
        stage1_steps: Some(2),
        stage2_steps: Some(1),
        stage3_steps: Some(if parser.is_some() { 1 } else { 0 }),
    };
    cfg.parser_checkpoint = parser.map(Path::to_path_buf);
    cfg.checkpoint_dir = root.join(name);
    cfg
}

/// A trained-for-a-few-steps model with and without a parser, shared by
/// every test in the binary.
pub fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let root = tempfile::tempdir().unwrap().keep();
        let parser_dir = root.join("parser");
        let parser = Parser::new(ParserSpec::lightweight(SIZE, 8, 2), 3).unwrap();
        save_parser(&parser_dir, &parser, 0, 3).unwrap();
        let with = train(&tiny_config(&root, "model", Some(&parser_dir))).unwrap();
        let without = train(&tiny_config(&root, "model-no-parser", None)).unwrap();
        Fixture {
            parser_dir,
            model_dir: with.checkpoints.last().unwrap().clone(),
            no_parser_dir: without.checkpoints.last().unwrap().clone(),
            root,
        }
    })
}
