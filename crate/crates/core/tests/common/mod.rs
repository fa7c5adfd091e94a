#![allow(dead_code)]

use coteach_core::{
    sample_uniform, Batch, Domain, DomainPairDataset, DomainShiftConfig, MlpClassifier, Sample,
    SeededRng, Split, TeacherPair, TrainConfig,
};

pub const K: usize = 3;
pub const D: usize = 2;
pub const B: usize = 8;

pub fn uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * sample_uniform(rng)
}

pub fn random_batch(rng: &mut SeededRng, domain: Domain, rows: usize) -> Batch {
    let samples: Vec<Sample> = (0..rows)
        .map(|_| {
            let x = vec![uniform(rng, -2.0, 2.0), uniform(rng, -2.0, 2.0)];
            let label = (domain == Domain::Source).then(|| (sample_uniform(rng) * K as f64) as usize);
            Sample::new(x, label, domain, Split::Train).unwrap()
        })
        .collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    Batch::from_samples(&refs).unwrap()
}

pub fn random_net(rng: &mut SeededRng, hidden: usize) -> MlpClassifier {
    MlpClassifier::init(&[D, hidden, K], rng).unwrap()
}

/// Teachers, a student and one batch per domain.
pub struct Instance {
    pub teachers: TeacherPair,
    pub student: MlpClassifier,
    pub bs: Batch,
    pub bt: Batch,
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = SeededRng::new(seed);
    let teachers = TeacherPair::new(random_net(&mut rng, 4), random_net(&mut rng, 4));
    let student = random_net(&mut rng, 5);
    let bs = random_batch(&mut rng, Domain::Source, B);
    let bt = random_batch(&mut rng, Domain::Target, B);
    Instance {
        teachers,
        student,
        bs,
        bt,
    }
}

/// Three classes, 30 degree rotation, a few hundred samples.
pub fn small_data(seed: u64) -> DomainPairDataset {
    let config = DomainShiftConfig {
        num_classes: 3,
        rotation_angle: 30f64.to_radians(),
        n_source: 120,
        n_target: 120,
        n_test: 60,
        seed,
        ..DomainShiftConfig::default()
    };
    coteach_core::generate_domain_pair(&config).unwrap()
}

pub fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 4,
        batch_size: 16,
        hidden: vec![8],
        seed,
        ..TrainConfig::default()
    }
}
