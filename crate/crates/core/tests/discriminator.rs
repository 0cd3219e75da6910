mod common;

use rand::Rng;
use tracerseg::discriminator::{
    cross_validate, evaluate, fold_assignment, history_csv, predict_tracer, train_fold, train_holdout, LabeledMip,
    TrainConfig, Tracer,
};
use tracerseg::nn::{load_model, save_model};
use tracerseg::preprocess::{MipImage, MIP_SIZE};
use tracerseg::Image2D;

use common::rng;

/// FDG images are bright in the upper half of rows, PSMA in the lower half.
fn toy_image(bright_top: bool, seed: u64) -> MipImage {
    let mut r = rng(seed);
    let mut img = Image2D::zeros(MIP_SIZE, MIP_SIZE);
    for v in 0..MIP_SIZE {
        let hot = (v >= MIP_SIZE / 2) == bright_top;
        for u in 0..MIP_SIZE {
            let base = if hot { 0.6 } else { 0.1 };
            img.set(u, v, base + r.random_range(0.0..0.1));
        }
    }
    MipImage::new(img, [3.0, 3.0]).unwrap()
}

fn toy_set(n: usize, seed: u64) -> Vec<LabeledMip> {
    (0..n)
        .map(|i| {
            let tracer = if i % 2 == 0 { Tracer::Fdg } else { Tracer::Psma };
            LabeledMip {
                image: toy_image(tracer == Tracer::Fdg, seed * 1000 + i as u64),
                tracer,
                case_id: format!("toy_{i}"),
            }
        })
        .collect()
}

fn quick() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        max_epochs: 4,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn learns_toy_task() {
    let data = toy_set(64, 1);
    let (train, val) = data.split_at(48);
    let out = train_fold(train, val, &quick()).unwrap();
    assert!(out.best_val_bce < out.history[0].val_bce);
    let (_, acc) = evaluate(&out.model, train, 16).unwrap();
    assert_eq!(acc, 1.0);
    let p = predict_tracer(&out.model, &toy_image(true, 999)).unwrap();
    assert!(p.probability < 0.5);
    assert_eq!(p.tracer, Tracer::Fdg);
    assert_eq!(predict_tracer(&out.model, &toy_image(false, 998)).unwrap().tracer, Tracer::Psma);
    assert!(history_csv(&out.history).starts_with("epoch,train_bce,val_bce,val_acc\n0,"));
}

#[test]
fn patience_counts_non_improving_epochs() {
    let data = toy_set(16, 2);
    let (train, val) = data.split_at(12);
    // steps this small never clear min_delta
    let frozen = TrainConfig {
        lr: 1e-15,
        max_epochs: 10,
        batch_size: 4,
        ..TrainConfig::default()
    };
    for patience in [0, 2] {
        let out = train_fold(train, val, &TrainConfig { patience, ..frozen.clone() }).unwrap();
        assert_eq!(out.history.len(), patience + 2);
        assert_eq!(out.best_epoch, 0);
    }
}

#[test]
fn model_round_trips_through_files() {
    let data = toy_set(16, 3);
    let cfg = TrainConfig {
        max_epochs: 1,
        ..quick()
    };
    let out = train_holdout(&data, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("disc.json");
    save_model(&out.model, &path).unwrap();
    let back = load_model(&path).unwrap();
    let img = toy_image(true, 5);
    assert_eq!(
        predict_tracer(&out.model, &img).unwrap().probability.to_bits(),
        predict_tracer(&back, &img).unwrap().probability.to_bits()
    );
}

#[test]
fn folds_are_stratified_and_disjoint() {
    let tracers: Vec<Tracer> = (0..50).map(|i| if i % 5 == 0 { Tracer::Fdg } else { Tracer::Psma }).collect();
    let a = fold_assignment(&tracers, 5, 7).unwrap();
    assert_eq!(a, fold_assignment(&tracers, 5, 7).unwrap());
    for f in 0..5 {
        let members: Vec<usize> = (0..50).filter(|&i| a[i] == f).collect();
        assert_eq!(members.len(), 10);
        assert_eq!(members.iter().filter(|&&i| tracers[i] == Tracer::Fdg).count(), 2);
    }
    assert!(fold_assignment(&tracers[..3], 5, 7).is_err());
}

#[test]
fn cross_validation_reports_every_fold() {
    let data = toy_set(20, 4);
    let cfg = TrainConfig {
        max_epochs: 1,
        ..quick()
    };
    let report = cross_validate(&data, 2, &cfg).unwrap();
    assert_eq!(report.fold_accuracies().len(), 2);
    assert!(report.fold_accuracies().iter().all(|a| (0.0..=1.0).contains(a)));
}

#[test]
fn bad_config_and_overlap_rejected() {
    let data = toy_set(4, 5);
    assert!(train_fold(&data, &data[..1], &quick()).is_err());
    let bad = TrainConfig { lr: 0.0, ..quick() };
    assert!(train_fold(&data[..2], &data[2..], &bad).is_err());
}
