mod common;

use common::{instance, Instance};
use coteach_core::{
    cross_entropy, grad_check, kdct_batch_loss, mict_batch_loss, mmd2_rbf, multit_batch_loss,
    BoundMlp, Result, SeededRng, Tape, Tensor, Var,
};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check_student<F>(inst: &Instance, build: F) -> f64
where
    F: Fn(&Tape, &BoundMlp) -> Result<Var>,
{
    grad_check(
        |tape, vars| build(tape, &BoundMlp::from_vars(vars)?),
        inst.student.params(),
        H,
    )
    .unwrap()
}

#[test]
fn cross_entropy_gradient() {
    for seed in 0..5 {
        let inst = instance(seed);
        let labels = inst.bs.labels.clone().unwrap();
        let err = check_student(&inst, |tape, net| {
            let (logits, _) = net.forward(tape, inst.bs.input(tape)?)?;
            cross_entropy(tape, logits, &labels)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn mmd_gradient() {
    let mut rng = SeededRng::new(7);
    let mut matrix = |rows: usize| {
        let v = (0..rows * 4).map(|_| rng.normal()).collect();
        Tensor::param(vec![rows, 4], v).unwrap()
    };
    let params = [matrix(8), matrix(6)];
    let err = grad_check(
        |tape, v| mmd2_rbf(tape, v[0], v[1], &[0.5, 1.0, 2.0, 4.0]),
        &params,
        H,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn kdct_gradient_over_gamma() {
    for seed in 0..3 {
        let inst = instance(seed);
        for gamma in [0.0, 0.3, 0.909, 1.0] {
            for batch in [&inst.bs, &inst.bt] {
                let err = check_student(&inst, |tape, net| {
                    kdct_batch_loss(tape, batch, &inst.teachers, net, gamma, 1.0)
                });
                assert!(err < TOL, "seed {seed} gamma {gamma}: {err}");
            }
        }
    }
}

#[test]
fn mict_gradient_over_lambda() {
    for seed in 0..3 {
        let inst = instance(seed);
        for lambda in [0.0, 0.5, 1.0] {
            let err = check_student(&inst, |tape, net| {
                mict_batch_loss(tape, &inst.bs, &inst.bt, &inst.teachers, net, lambda, 1.0)
            });
            assert!(err < TOL, "seed {seed} lambda {lambda}: {err}");
        }
    }
}

#[test]
fn multit_gradient() {
    let inst = instance(11);
    let err = check_student(&inst, |tape, net| {
        multit_batch_loss(tape, &inst.bs, &inst.teachers, net, 1.0)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn temperature_gradient() {
    let inst = instance(12);
    let err = check_student(&inst, |tape, net| {
        kdct_batch_loss(tape, &inst.bs, &inst.teachers, net, 0.7, 2.5)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn combined_ct_gradient() {
    for seed in 0..3 {
        let inst = instance(100 + seed);
        let err = check_student(&inst, |tape, net| {
            let ls = kdct_batch_loss(tape, &inst.bs, &inst.teachers, net, 0.85, 1.0)?;
            let lt = kdct_batch_loss(tape, &inst.bt, &inst.teachers, net, 0.85, 1.0)?;
            let lm = mict_batch_loss(tape, &inst.bs, &inst.bt, &inst.teachers, net, 0.4, 1.0)?;
            let kd = tape.add(ls, lt)?;
            tape.add(kd, lm)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}
