use lssat_core::data::{generate_synthetic, load_dataset};
use lssat_core::model::{load_checkpoint, save_checkpoint};
use lssat_core::train::{evaluate, predict, train_step};
use lssat_core::*;

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        image_size: 16,
        epochs: 2,
        batch_size: 4,
        dataset: DatasetSource::Synthetic {
            family: SynthFamily::Textures,
            per_class: 6,
            classes: 2,
        },
        ..ExperimentConfig::desk_scale()
    }
}

#[test]
fn train_checkpoint_reload_predicts_identically() {
    let cfg = small_config();
    let data = generate_synthetic(6, 2, 16, cfg.seed).unwrap();
    let (report, model) = run_experiment(&cfg, &data).unwrap();
    assert_eq!(report.epoch_losses.len(), 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &Checkpoint::from_model(&model, &cfg)).unwrap();
    let ckpt = load_checkpoint(&path).unwrap();
    assert_eq!(ckpt.config, cfg);
    let reloaded = ckpt.into_model().unwrap();

    let (x, _) = data.batch(&[0, 1, 2]).unwrap();
    assert_eq!(predict(&model, &cfg, &x).unwrap(), predict(&reloaded, &cfg, &x).unwrap());
    assert_eq!(evaluate(&model, &cfg, &data).unwrap(), evaluate(&reloaded, &cfg, &data).unwrap());
}

#[test]
fn saved_dataset_loads_back() {
    let data = generate_synthetic(3, 2, 16, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    let loaded = load_dataset(dir.path(), &dir.path().join("labels.csv"), 2, 16).unwrap();
    assert_eq!(loaded.len(), 6);
    for (a, b) in data.samples.iter().zip(&loaded.samples) {
        assert_eq!(a.label, b.label);
        let err = a.image.values.iter().zip(&b.image.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err <= 0.5 / 255.0 + 1e-12, "8-bit round trip error {err}");
    }
}

#[test]
fn small_step_descends() {
    for seed in 0..10 {
        let cfg = ExperimentConfig {
            seed,
            lr_max: 1e-6,
            lr_min: 1e-6,
            weight_decay: 0.0,
            ..small_config()
        };
        let data = generate_synthetic(2, 2, 16, seed).unwrap();
        let (x, y) = data.batch(&[0, 1, 2, 3]).unwrap();
        let mut state = TrainState::new(LssatModel::from_config(&cfg).unwrap(), &cfg, 10);
        let key = RngKey::new(seed);
        let before = train_step(&mut state, &x, &y, &cfg, key).unwrap();
        let after = train_step(&mut state, &x, &y, &cfg, key).unwrap();
        assert!(after.joint < before.joint, "seed {seed}: {} !< {}", after.joint, before.joint);
    }
}

#[test]
fn every_triplet_trains() {
    let data = generate_synthetic(2, 2, 16, 1).unwrap();
    for triplet in ConfigurationTriplet::all() {
        let cfg = ExperimentConfig {
            triplet: triplet.clone(),
            epochs: 1,
            ..small_config()
        };
        let (report, _) = run_experiment(&cfg, &data).unwrap();
        assert!(report.final_losses.joint.is_finite(), "{triplet}");
    }
}
