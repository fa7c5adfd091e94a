mod common;

use common::{instance, K};
use coteach_core::{
    kdct_batch_loss, mict_batch_loss, mict_batch_loss_per_sample, mix_rows, teacher_probs,
    SeededRng, Tape, Tensor,
};
use proptest::prelude::*;

fn kdct_value(seed: u64, gamma: f64, target_batch: bool) -> f64 {
    let inst = instance(seed);
    let tape = Tape::new();
    let net = inst.student.bind_frozen(&tape);
    let batch = if target_batch { &inst.bt } else { &inst.bs };
    let v = kdct_batch_loss(&tape, batch, &inst.teachers, &net, gamma, 1.0).unwrap();
    tape.scalar(v).unwrap()
}

fn probs_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, 2..6).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn kdct_is_affine_in_gamma(seed in any::<u64>(), gamma in 0.0f64..=1.0, target in any::<bool>()) {
        let l = kdct_value(seed, gamma, target);
        let l1 = kdct_value(seed, 1.0, target);
        let l0 = kdct_value(seed, 0.0, target);
        prop_assert!((l - (gamma * l1 + (1.0 - gamma) * l0)).abs() <= 1e-12);
    }

    #[test]
    fn mict_endpoints_are_single_teacher_kd(seed in any::<u64>()) {
        let inst = instance(seed);
        let tape = Tape::new();
        let net = inst.student.bind_frozen(&tape);
        let m1 = mict_batch_loss(&tape, &inst.bs, &inst.bt, &inst.teachers, &net, 1.0, 1.0).unwrap();
        let m0 = mict_batch_loss(&tape, &inst.bs, &inst.bt, &inst.teachers, &net, 0.0, 1.0).unwrap();
        let ks = kdct_batch_loss(&tape, &inst.bs, &inst.teachers, &net, 1.0, 1.0).unwrap();
        let kt = kdct_batch_loss(&tape, &inst.bt, &inst.teachers, &net, 1.0, 1.0).unwrap();
        prop_assert!((tape.scalar(m1).unwrap() - tape.scalar(ks).unwrap()).abs() <= 1e-12);
        prop_assert!((tape.scalar(m0).unwrap() - tape.scalar(kt).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn mixed_targets_are_distributions(seed in any::<u64>(), lambdas in prop::collection::vec(0.0f64..=1.0, 8)) {
        let inst = instance(seed);
        let p_s = teacher_probs(&inst.teachers.source, &inst.bs.x, inst.bs.rows, 1.0).unwrap();
        let p_t = teacher_probs(&inst.teachers.target, &inst.bt.x, inst.bt.rows, 1.0).unwrap();
        let mixed = mix_rows(p_s.values(), p_t.values(), K, &lambdas);
        for row in mixed.chunks_exact(K) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn per_sample_lambda_matches_shared_when_equal(seed in any::<u64>(), lambda in 0.0f64..=1.0) {
        let inst = instance(seed);
        let tape = Tape::new();
        let net = inst.student.bind_frozen(&tape);
        let a = mict_batch_loss(&tape, &inst.bs, &inst.bt, &inst.teachers, &net, lambda, 1.0).unwrap();
        let b = mict_batch_loss_per_sample(&tape, &inst.bs, &inst.bt, &inst.teachers, &net, &[lambda; 8], 1.0).unwrap();
        prop_assert_eq!(tape.scalar(a).unwrap(), tape.scalar(b).unwrap());
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_itself(p in probs_strategy(), logits in prop::collection::vec(-5.0f64..5.0, 5)) {
        let k = p.len();
        let tape = Tape::new();
        let target = Tensor::new(vec![1, k], p.clone()).unwrap();
        let z = tape.input(logits[..k].to_vec(), 1, k).unwrap();
        let log_q = tape.log_softmax(z, 1.0).unwrap();
        let kl = tape.scalar(tape.kl_div(&target, log_q).unwrap()).unwrap();
        prop_assert!(kl >= -1e-12);

        let self_logits: Vec<f64> = p.iter().map(|x| x.ln()).collect();
        let log_p = tape.log_softmax(tape.input(self_logits, 1, k).unwrap(), 1.0).unwrap();
        let self_kl = tape.scalar(tape.kl_div(&target, log_p).unwrap()).unwrap();
        prop_assert!(self_kl.abs() <= 1e-9, "self KL {}", self_kl);
    }

    #[test]
    fn log_softmax_normalizes_and_ignores_shifts(logits in prop::collection::vec(-30.0f64..30.0, 2..7), c in -50.0f64..50.0) {
        let k = logits.len();
        let tape = Tape::new();
        let a = tape.log_softmax(tape.input(logits.clone(), 1, k).unwrap(), 1.0).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|x| x + c).collect();
        let b = tape.log_softmax(tape.input(shifted, 1, k).unwrap(), 1.0).unwrap();
        let (a, b) = (tape.value(a).unwrap(), tape.value(b).unwrap());
        let mass: f64 = a.values().iter().map(|v| v.exp()).sum();
        prop_assert!((mass - 1.0).abs() <= 1e-12);
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }
}

#[test]
fn per_sample_lambda_draws_are_independent_rows() {
    let inst = instance(3);
    let mut rng = SeededRng::new(1);
    let lambdas: Vec<f64> = (0..8).map(|_| coteach_core::sample_uniform(&mut rng)).collect();
    let p_s = teacher_probs(&inst.teachers.source, &inst.bs.x, 8, 1.0).unwrap();
    let p_t = teacher_probs(&inst.teachers.target, &inst.bt.x, 8, 1.0).unwrap();
    let mixed = mix_rows(p_s.values(), p_t.values(), K, &lambdas);
    for (r, l) in lambdas.iter().enumerate() {
        for c in 0..K {
            let want = l * p_s.values()[r * K + c] + (1.0 - l) * p_t.values()[r * K + c];
            assert_eq!(mixed[r * K + c], want);
        }
    }
}
