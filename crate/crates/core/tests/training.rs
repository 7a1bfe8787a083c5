use std::fs;
use std::path::Path;

use bridgeseg::bridge::{DiscriminatorConfig, GeneratorConfig, SBLossWeights, TimeSchedule};
use bridgeseg::checkpoint::load_checkpoint;
use bridgeseg::dataset::{Dataset, ManifestEntry};
use bridgeseg::image::Domain;
use bridgeseg::phantom::{generate_phantoms, PhantomSpec};
use bridgeseg::seg::SegConfig;
use bridgeseg::train::{
    read_loss_log, train, train_e2e, train_two_stage, TrainConfig, TrainMode, E2E_LOG, RECORD_FILE, SEGMENTATION_LOG,
    TRANSLATION_LOG,
};
use bridgeseg::Error;

fn tiny_config(mode: TrainMode) -> TrainConfig {
    TrainConfig {
        mode,
        epochs: 2,
        lr: 1e-3,
        seed: 11,
        schedule: TimeSchedule::uniform(3, 0.01).unwrap(),
        weights: SBLossWeights::new(0.7, 1.3).unwrap(),
        generator: GeneratorConfig {
            base_channels: 4,
            n_res_blocks: 1,
            time_features: 4,
            time_hidden: 8,
        },
        discriminator: DiscriminatorConfig {
            base_channels: 4,
            time_features: 4,
            ..Default::default()
        },
        seg: SegConfig {
            depth: 2,
            base_channels: 4,
            ..Default::default()
        },
        checkpoint_every: 1,
        ..Default::default()
    }
}

fn tiny_train_set() -> Dataset {
    generate_phantoms(&PhantomSpec::new(2, 4, 2, 32))
        .unwrap()
        .into_unpaired_train()
}

fn f32_col(rows: &[Vec<String>], i: usize) -> Vec<f32> {
    rows.iter().map(|r| r[i].parse::<f32>().unwrap()).collect()
}

#[test]
fn e2e_writes_checkpoints_logs_and_a_record() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(TrainMode::E2E);
    let rec = train(&tiny_train_set(), &config, dir.path()).unwrap();
    assert_eq!(rec.checkpoints.len(), 2);
    assert!(rec.checkpoints.iter().all(|p| p.exists()));
    assert!(dir.path().join(RECORD_FILE).exists());
    assert_eq!(rec.epochs.len(), 2);
    assert!(rec.synthetic_slices.is_none());

    let (header, rows) = read_loss_log(&dir.path().join(E2E_LOG)).unwrap();
    assert_eq!(
        header,
        ["step", "epoch", "t_index", "adv", "sb", "reg", "unsb", "seg", "total"]
    );
    // 2 subjects with masks × 2 slices × 2 epochs
    assert_eq!(rows.len(), 8);
    let (adv, sb, reg) = (f32_col(&rows, 3), f32_col(&rows, 4), f32_col(&rows, 5));
    let (unsb, seg, total) = (f32_col(&rows, 6), f32_col(&rows, 7), f32_col(&rows, 8));
    for i in 0..rows.len() {
        assert_eq!(unsb[i], (adv[i] + sb[i] * 0.7) + reg[i] * 1.3, "row {i}");
        assert_eq!(total[i], unsb[i] + seg[i], "row {i}");
        assert!(rows[i][2].parse::<usize>().unwrap() < 3);
    }

    let last = load_checkpoint(rec.final_checkpoint()).unwrap();
    assert_eq!(last.epoch, 2);
    assert_eq!(last.config, config);
}

#[test]
fn two_stage_freezes_the_generator_for_the_second_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        seg_epochs: Some(1),
        ..tiny_config(TrainMode::TwoStage)
    };
    let data = tiny_train_set();
    let rec = train_two_stage(&data, &config, dir.path()).unwrap();
    assert_eq!(rec.synthetic_slices, Some(data.labeled_sources().len()));
    let stage1 = rec
        .checkpoints
        .iter()
        .rfind(|p| p.file_name().unwrap().to_str().unwrap().starts_with("stage1_"))
        .unwrap();
    let a = load_checkpoint(stage1).unwrap();
    let b = load_checkpoint(rec.final_checkpoint()).unwrap();
    assert_eq!(a.generator.params, b.generator.params);
    assert_eq!(a.discriminator.params, b.discriminator.params);
    assert_ne!(a.segmenter.params, b.segmenter.params);

    let (header, rows) = read_loss_log(&dir.path().join(TRANSLATION_LOG)).unwrap();
    assert_eq!(header, ["step", "epoch", "t_index", "adv", "sb", "reg", "total"]);
    for r in &rows {
        let v: Vec<f32> = r[3..].iter().map(|s| s.parse().unwrap()).collect();
        assert_eq!(v[3], (v[0] + v[1] * 0.7) + v[2] * 1.3);
    }
    let (header, rows) = read_loss_log(&dir.path().join(SEGMENTATION_LOG)).unwrap();
    assert_eq!(header, ["step", "epoch", "seg"]);
    assert_eq!(rows.len(), 4);
}

#[test]
fn identical_seeds_give_identical_logs() {
    let config = tiny_config(TrainMode::E2E);
    let data = tiny_train_set();
    let read = |dir: &Path| fs::read(dir.join(E2E_LOG)).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train_e2e(&data, &config, a.path()).unwrap();
    train_e2e(&data, &config, b.path()).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    let c = tempfile::tempdir().unwrap();
    train_e2e(&data, &TrainConfig { seed: 12, ..config }, c.path()).unwrap();
    assert_ne!(read(a.path()), read(c.path()));
}

#[test]
fn ct_masks_in_training_data_are_rejected_in_both_modes() {
    let mut data = tiny_train_set();
    let i = data.slices.iter().position(|s| s.domain == Domain::Ct).unwrap();
    let s = &data.slices[i];
    let mask = bridgeseg::image::LabelMask::new(ndarray::Array2::zeros(s.shape()), s.subject_id.clone(), s.slice_index)
        .unwrap();
    data.masks[i] = Some(mask);
    data.manifest.entries[i] = ManifestEntry::new(&s.subject_id.clone(), s.slice_index, Domain::Ct, true);
    for mode in [TrainMode::E2E, TrainMode::TwoStage] {
        let dir = tempfile::tempdir().unwrap();
        match train(&data, &tiny_config(mode), dir.path()) {
            Err(Error::Contract(msg)) => assert!(msg.contains("CT"), "{msg}"),
            other => panic!("{mode:?}: expected a contract error, got {other:?}"),
        }
        assert!(!dir.path().join("checkpoints").exists());
    }
}

#[test]
fn non_train_splits_are_rejected() {
    let test = generate_phantoms(&PhantomSpec::new(2, 2, 1, 32)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        train(&test, &tiny_config(TrainMode::E2E), dir.path()),
        Err(Error::Contract(_))
    ));
}
