use std::fs;

use ldhnet_core::augment::{augment_dataset, Role};
use ldhnet_core::dataset::{generate_phantom_sized, PatientStudy};
use ldhnet_core::model::ModelConfig;
use ldhnet_core::train::{cmd_train, RunConfig};

fn tiny_model(size: usize) -> ModelConfig {
    let mut m = ModelConfig::scaled(8, 2, (size, size));
    m.reduction = 4;
    m.mlp_hidden = vec![8];
    m
}

#[test]
fn multiplier_five_on_614_studies_gives_3070() {
    let studies = generate_phantom_sized(614, 0.63, 1, 16).unwrap();
    let tagged: Vec<(&PatientStudy, Role)> = studies.iter().map(|s| (s, Role::Train)).collect();
    assert_eq!(augment_dataset(&tagged, 5, 2, 1).unwrap().len(), 3070);
}

#[test]
fn holdout_run_logs_augmented_sample_count() {
    let studies = generate_phantom_sized(767, 0.63, 4, 16).unwrap();
    let cfg = RunConfig {
        seed: 4,
        epochs: 1,
        batch_size: 64,
        folds: 1,
        val_fraction: 0.2,
        aug_multiplier: 5,
        model: tiny_model(16),
        ..RunConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (summary, outcomes) = cmd_train(&studies, &cfg, dir.path(), false, &mut |_, _| {}).unwrap();
    assert_eq!(outcomes[0].train_markers.len(), 614);
    assert_eq!(summary.folds[0].n_train_samples, 3070);
    let text = fs::read_to_string(dir.path().join("summary.json")).unwrap();
    assert!(text.contains("\"n_train_samples\": 3070"));
}
