mod common;

use std::collections::HashSet;

use common::*;
use smug_core::dataset::{simulate_measurement, Dataset, DatasetConfig, Split};
use smug_core::phantom::generate_phantom;
use smug_core::CoreError;

fn small() -> DatasetConfig {
    DatasetConfig {
        height: 16,
        width: 16,
        coils: 2,
        n_train: 4,
        n_val: 2,
        n_test: 3,
        noise_std: 0.01,
        seed: 11,
        ..DatasetConfig::default()
    }
}

#[test]
fn default_config_is_desk_scale() {
    let c = DatasetConfig::default();
    assert_eq!((c.height, c.width, c.coils), (32, 32, 4));
    assert_eq!((c.n_train, c.n_val, c.n_test), (40, 8, 8));
    assert_eq!((c.acceleration, c.acs_rows), (4, 4));
    assert_eq!(c.noise_std, 0.0);
    let mask = c.build_mask(c.acceleration).unwrap();
    assert_eq!(mask.sampling_rate(), 0.25);
}

#[test]
fn save_load_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    for split in Split::ALL {
        let ds = Dataset::generate(&small(), split).unwrap();
        let path = dir.path().join(split.file_name());
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
        assert_eq!(Dataset::read_header(&path).unwrap(), ds.header());
    }
}

#[test]
fn generation_is_pure_in_config() {
    let a = Dataset::generate(&small(), Split::Val).unwrap();
    let b = Dataset::generate(&small(), Split::Val).unwrap();
    assert_eq!(a, b);
    let other = DatasetConfig {
        seed: 12,
        ..small()
    };
    assert_ne!(a, Dataset::generate(&other, Split::Val).unwrap());
}

#[test]
fn splits_are_disjoint() {
    let cfg = small();
    let mut indices = HashSet::new();
    let mut seeds = HashSet::new();
    for split in Split::ALL {
        let ds = Dataset::generate(&cfg, split).unwrap();
        assert_eq!(ds.len(), cfg.count(split));
        for s in &ds.samples {
            assert!(indices.insert(s.meta.index));
            assert!(seeds.insert(s.meta.phantom_seed));
        }
    }
}

#[test]
fn every_sample_regenerates_from_its_metadata() {
    let ds = Dataset::generate(&small(), Split::Train).unwrap();
    let model = ds.acquisition_model().unwrap();
    for s in &ds.samples {
        let t = generate_phantom(16, 16, s.meta.phantom_seed).unwrap();
        assert_eq!(t, s.target);
        let y = simulate_measurement(&model, &t, ds.config.noise_std, s.meta.noise_seed).unwrap();
        assert_eq!(y, s.kspace);
    }
}

#[test]
fn noiseless_measurement_equals_forward() {
    let m = model(16, 16, 3, 4, 4, 1);
    let t = generate_phantom(16, 16, 5).unwrap();
    assert_eq!(simulate_measurement(&m, &t, 0.0, 9).unwrap(), m.forward(&t).unwrap());
}

#[test]
fn noise_statistics_and_mask_honesty() {
    let m = model(64, 64, 4, 2, 4, 2);
    let t = generate_phantom(64, 64, 5).unwrap();
    let clean = m.forward(&t).unwrap();
    let std = 0.05;
    let noisy = simulate_measurement(&m, &t, std, 3).unwrap();
    let kept = m.mask().row_flags();
    let mut components = Vec::new();
    for c in 0..4 {
        for ((nrow, crow), &k) in noisy.coil(c).chunks(64).zip(clean.coil(c).chunks(64)).zip(&kept) {
            for (a, b) in nrow.iter().zip(crow) {
                let d = a - b;
                if k {
                    components.extend([d.re, d.im]);
                } else {
                    assert!(a.re == 0.0 && a.im == 0.0);
                }
            }
        }
    }
    assert!(components.len() >= 10_000);
    let mean = components.iter().sum::<f64>() / components.len() as f64;
    let var = components.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / components.len() as f64;
    assert!((var.sqrt() - std).abs() < 0.05 * std, "empirical std {}", var.sqrt());
}

#[test]
fn truncated_file_reports_expected_and_actual_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("val.smug");
    Dataset::generate(&small(), Split::Val).unwrap().save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
    match Dataset::load(&path) {
        Err(CoreError::PayloadLength { expected, actual, .. }) => assert_eq!(expected, actual + 16),
        other => panic!("unexpected {other:?}"),
    }
    // The header is still readable without the payload.
    assert_eq!(Dataset::read_header(&path).unwrap().samples.len(), 2);
}

#[test]
fn remeasure_keeps_targets_and_changes_mask() {
    let ds = Dataset::generate(&small(), Split::Test).unwrap();
    let denser = ds.remeasure(2).unwrap();
    assert_eq!(denser.mask.sampling_rate(), 0.5);
    for (a, b) in ds.samples.iter().zip(&denser.samples) {
        assert_eq!(a.target, b.target);
    }
    assert_eq!(ds.remeasure(ds.config.acceleration).unwrap(), ds);
}
