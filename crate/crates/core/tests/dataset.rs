use std::fs;

use coteach_core::{
    bayes_oracle_accuracy, generate_domain_pair, generate_domain_pair_traced, load_dataset,
    metadata_path, save_dataset, train_source, Domain, DomainShiftConfig, Error, TrainConfig,
};
use statrs::distribution::{ContinuousCDF, Normal};

fn config(seed: u64) -> DomainShiftConfig {
    DomainShiftConfig {
        seed,
        ..DomainShiftConfig::default()
    }
}

#[test]
fn two_class_oracle_matches_closed_form() {
    // Means at +-r on a line: the Bayes error is Phi(-r / sigma).
    let phi = Normal::new(0.0, 1.0).unwrap();
    for (r, sigma) in [(1.0, 1.0), (2.0, 1.0), (1.5, 1.2)] {
        let cfg = DomainShiftConfig {
            num_classes: 2,
            cluster_separation: r,
            noise_sigma: sigma,
            ambiguity_rate: 0.0,
            rotation_angle: 0.0,
            n_source: 100,
            n_target: 100,
            n_test: 20_000,
            ..config(5)
        };
        let (acc_s, acc_t) = bayes_oracle_accuracy(&generate_domain_pair(&cfg).unwrap()).unwrap();
        let want = phi.cdf(r / sigma);
        assert!((acc_s - want).abs() < 0.01, "r={r} sigma={sigma}: {acc_s} vs {want}");
        assert!((acc_t - want).abs() < 0.01, "r={r} sigma={sigma}: {acc_t} vs {want}");
    }
}

#[test]
fn oracle_is_high_on_well_separated_rotated_domains() {
    let cfg = DomainShiftConfig {
        rotation_angle: 60f64.to_radians(),
        ambiguity_rate: 0.0,
        ..config(1)
    };
    let (s, t) = bayes_oracle_accuracy(&generate_domain_pair(&cfg).unwrap()).unwrap();
    assert!(s >= 0.95 && t >= 0.95, "{s} {t}");
}

#[test]
fn oracle_does_not_improve_with_more_ambiguity() {
    let mean_oracle = |rho: f64| {
        let accs: Vec<f64> = (0..5)
            .map(|seed| {
                let cfg = DomainShiftConfig {
                    rotation_angle: 90f64.to_radians(),
                    ambiguity_rate: rho,
                    ..config(seed)
                };
                let (s, t) = bayes_oracle_accuracy(&generate_domain_pair(&cfg).unwrap()).unwrap();
                0.5 * (s + t)
            })
            .collect();
        accs.iter().sum::<f64>() / accs.len() as f64
    };
    let curve: Vec<f64> = [0.0, 0.05, 0.1, 0.15, 0.2].iter().map(|&r| mean_oracle(r)).collect();
    for w in curve.windows(2) {
        assert!(w[1] <= w[0], "{curve:?}");
    }
}

#[test]
fn without_shift_source_model_transfers() {
    let gaps: Vec<f64> = (0..5)
        .map(|seed| {
            let cfg = DomainShiftConfig {
                rotation_angle: 0.0,
                translation: vec![0.0, 0.0],
                ambiguity_rate: 0.0,
                ..config(seed)
            };
            let data = generate_domain_pair(&cfg).unwrap();
            let tc = TrainConfig {
                epochs: 5,
                seed,
                ..TrainConfig::default()
            };
            let model = train_source(&data, &tc).unwrap().model;
            let r = coteach_core::evaluate_ude(&model, &data).unwrap();
            r.acc_source - r.acc_target
        })
        .collect();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    assert!(mean.abs() < 0.03, "{gaps:?}");
}

#[test]
fn ambiguous_minority_meets_its_floor() {
    let cfg = config(3);
    let (_, trace) = generate_domain_pair_traced(&cfg).unwrap();
    let n = cfg.n_test as f64;
    let rho = cfg.ambiguity_rate;
    let floor = (rho * n).floor() - 3.0 * (n * rho * (1.0 - rho)).sqrt();
    assert!(trace.source_test.cross_domain_count(Domain::Source) as f64 >= floor);
    assert!(trace.target_test.cross_domain_count(Domain::Target) as f64 >= floor);
}

#[test]
fn round_trip_is_exact_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let ds = generate_domain_pair(&config(9)).unwrap();
    save_dataset(&ds, &a).unwrap();
    save_dataset(&generate_domain_pair(&config(9)).unwrap(), &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(metadata_path(&a).exists());
    let back = load_dataset(&a).unwrap();
    assert_eq!(back, ds);
    assert!(back.target_train.iter().all(|s| s.label().is_none()));
}

#[test]
fn other_seed_gives_other_file() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    save_dataset(&generate_domain_pair(&config(1)).unwrap(), &a).unwrap();
    save_dataset(&generate_domain_pair(&config(2)).unwrap(), &b).unwrap();
    assert_ne!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn truncated_file_names_the_record() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    save_dataset(&generate_domain_pair(&config(4)).unwrap(), &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let cut = text.len() - text.len() / 3;
    let cut = text[..cut].rfind(',').unwrap();
    fs::write(&path, &text[..cut]).unwrap();
    let err = load_dataset(&path).unwrap_err();
    assert!(matches!(err, Error::Parse { .. }), "{err}");
    assert!(err.to_string().contains("record"), "{err}");

    // Dropping whole records is caught by the metadata counts.
    let full: Vec<&str> = text.lines().collect();
    fs::write(&path, full[..full.len() - 10].join("\n")).unwrap();
    let err = load_dataset(&path).unwrap_err();
    assert!(err.to_string().contains("do not match"), "{err}");
}

#[test]
fn labeled_target_training_record_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    save_dataset(&generate_domain_pair(&config(4)).unwrap(), &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let tampered: Vec<String> = text
        .lines()
        .map(|l| {
            if l.ends_with(",,target,train") {
                l.replacen(",,target,train", ",1,target,train", 1)
            } else {
                l.to_string()
            }
        })
        .collect();
    fs::write(&path, tampered.join("\n")).unwrap();
    let err = load_dataset(&path).unwrap_err();
    assert!(err.to_string().contains("record 2000"), "{err}");
}

#[test]
fn splits_are_disjoint_and_balanced() {
    let ds = generate_domain_pair(&config(6)).unwrap();
    let k = ds.num_classes;
    for set in [&ds.source_train, &ds.source_test, &ds.target_test] {
        let mut counts = vec![0usize; k];
        for s in set.iter() {
            counts[s.label().unwrap()] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
    }
    let mut seen = std::collections::HashSet::new();
    for s in ds.source_train.iter().chain(&ds.target_train).chain(&ds.source_test).chain(&ds.target_test) {
        let key: Vec<u64> = s.features.iter().map(|v| v.to_bits()).collect();
        assert!(seen.insert(key));
    }
}
