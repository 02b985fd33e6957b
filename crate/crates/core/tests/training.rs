//! Curriculum, parsing-target cache and parser quality.

use facefill_core::dataset::{ImageSet, LabeledSet};
use facefill_core::imaging::AugmentConfig;
use facefill_core::losses::Stage;
use facefill_core::networks::{Parser, ParserSpec};
use facefill_core::synthetic::{synthetic_faces, SyntheticConfig};
use facefill_core::training::{
    cache_parsing_targets, train_parser, ParserTrainConfig, ScheduleConfig, TrainConfig, Trainer,
    D_ACCURACY_THRESHOLD,
};

fn tiny(s1: u64, s2: u64, s3: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.image_size = 32;
    cfg.mask_size = 16;
    cfg.local_size = 16;
    cfg.batch_size = 2;
    cfg.augment = AugmentConfig::disabled();
    cfg.schedule = ScheduleConfig {
        total_steps: None,
        stage1_steps: Some(s1),
        stage2_steps: Some(s2),
        stage3_steps: Some(s3),
    };
    cfg
}

fn images(size: usize, n: usize, seed: u64) -> ImageSet {
    ImageSet::from_faces(&synthetic_faces(&SyntheticConfig::new(size, n, 1, seed)).unwrap())
}

fn frozen_parser(size: usize, seed: u64) -> Parser {
    let mut p = Parser::new(ParserSpec::lightweight(size, 8, 2), seed).unwrap();
    p.set_frozen(true);
    p
}

#[test]
fn stage_changes_exactly_twice_and_gates_discriminators() {
    let mut trainer = Trainer::new(tiny(6, 5, 4), images(32, 3, 1), Some(frozen_parser(32, 2))).unwrap();
    let records = trainer.run().unwrap().records;
    let stages: Vec<Stage> = records.iter().map(|r| r.stage).collect();
    assert_eq!(stages.len(), 15);
    assert_eq!(stages.windows(2).filter(|w| w[0] != w[1]).count(), 2);
    assert_eq!((stages[0], stages[6], stages[11]), (Stage::One, Stage::Two, Stage::Three));
    for r in &records {
        match r.stage {
            Stage::One => assert!(r.d_local_acc.is_none() && r.d_global_acc.is_none()),
            Stage::Two => assert!(r.d_local_acc.is_some() && r.d_global_acc.is_none()),
            Stage::Three => assert!(r.d_local_acc.is_some() && r.d_global_acc.is_some()),
        }
        for (acc, updated) in [(r.d_local_acc, r.d_local_updated), (r.d_global_acc, r.d_global_updated)] {
            match acc {
                Some(a) => assert_eq!(updated, a <= D_ACCURACY_THRESHOLD),
                None => assert!(!updated),
            }
        }
    }
}

#[test]
fn autoencoder_stage_leaves_discriminators_untouched() {
    let mut trainer = Trainer::new(tiny(8, 0, 0), images(32, 3, 4), None).unwrap();
    let before = (trainer.d_local().net().digest(), trainer.d_global().net().digest());
    let g_before = trainer.generator().net().digest();
    trainer.run().unwrap();
    assert_eq!(before, (trainer.d_local().net().digest(), trainer.d_global().net().digest()));
    assert_ne!(g_before, trainer.generator().net().digest());
}

#[test]
fn parsing_targets_are_cached_by_parser_digest() {
    let set = images(32, 5, 6);
    let parser = frozen_parser(32, 7);
    let (store, computed) = cache_parsing_targets(&parser, &set, None).unwrap();
    assert_eq!((store.maps.len(), computed), (5, 5));
    assert_eq!(store.parser_digest, parser.digest());

    let (again, recomputed) = cache_parsing_targets(&parser, &set, Some(store.clone())).unwrap();
    assert_eq!(recomputed, 0);
    assert_eq!(again.maps, store.maps);
    for (id, img) in set.ids.iter().zip(&set.images).take(3) {
        assert_eq!(store.maps[id], parser.parse(img).unwrap());
    }

    let other = frozen_parser(32, 8);
    let (fresh, n) = cache_parsing_targets(&other, &set, Some(store)).unwrap();
    assert_eq!(n, 5);
    assert_eq!(fresh.parser_digest, other.digest());

    let mut unfrozen = frozen_parser(32, 7);
    unfrozen.set_frozen(false);
    assert!(cache_parsing_targets(&unfrozen, &set, None).is_err());
}

#[test]
fn parser_reaches_high_f_score_on_synthetic_faces() {
    let set = LabeledSet::from_faces(&synthetic_faces(&SyntheticConfig::new(64, 10, 5, 3)).unwrap());
    assert_eq!(set.len(), 50);
    let (train, val) = set.split_validation(5);
    let cfg = ParserTrainConfig {
        seed: 1,
        max_steps: 700,
        ..ParserTrainConfig::default()
    };
    let out = train_parser(&cfg, &train, &val).unwrap();
    assert!(out.scores.overall > 0.9, "f-score {} after {} steps", out.scores.overall, out.steps);
}
