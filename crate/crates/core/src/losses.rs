//! Training objectives: supervised cross-entropy, feature MMD, and the
//! distillation losses (single-teacher, averaged multi-teacher, kdCT and
//! miCT).
//!
//! Teacher outputs are always computed off-tape and enter the graph as
//! constants, so no gradient ever reaches a teacher.

use crate::error::{Error, Result};
use crate::model::{BoundMlp, MlpClassifier};
use crate::synth::{Domain, Sample};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::TeacherPair;

/// A mini-batch of stacked feature rows.
///
/// `domain` is `None` when the rows come from more than one domain.
/// `labels` is present only when every row is labeled.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Vec<f64>,
    pub rows: usize,
    pub dim: usize,
    pub domain: Option<Domain>,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Batch> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let dim = first.features.len();
        let mut x = Vec::with_capacity(samples.len() * dim);
        let mut labels = Some(Vec::with_capacity(samples.len()));
        let mut domain = Some(first.domain);
        for s in samples {
            if s.features.len() != dim {
                return Err(Error::Shape {
                    op: "batch",
                    detail: format!("feature widths {} and {}", dim, s.features.len()),
                });
            }
            x.extend_from_slice(&s.features);
            if domain != Some(s.domain) {
                domain = None;
            }
            labels = match (labels, s.label()) {
                (Some(mut l), Some(y)) => {
                    l.push(y);
                    Some(l)
                }
                _ => None,
            };
        }
        Ok(Batch {
            x,
            rows: samples.len(),
            dim,
            domain,
            labels,
        })
    }

    /// Rows `indices` of `samples`.
    pub fn gather(samples: &[Sample], indices: &[usize]) -> Result<Batch> {
        let picked: Vec<&Sample> = indices.iter().map(|&i| &samples[i]).collect();
        Batch::from_samples(&picked)
    }

    pub fn input(&self, tape: &Tape) -> Result<Var> {
        tape.input(self.x.clone(), self.rows, self.dim)
    }
}

/// Teacher class probabilities at `temperature`, as a constant tensor.
pub fn teacher_probs(teacher: &MlpClassifier, x: &[f64], rows: usize, temperature: f64) -> Result<Tensor> {
    let p = teacher.probs(x, rows, temperature)?;
    Tensor::new(vec![rows, teacher.num_classes()], p)
}

/// Mean cross-entropy of `logits` against integer `labels`.
pub fn cross_entropy(tape: &Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let log_p = tape.log_softmax(logits, 1.0)?;
    let picked = tape.gather(log_p, labels)?;
    let mean = tape.reduce_mean(picked)?;
    tape.scale(mean, -1.0)
}

/// Biased (V-statistic) squared MMD between the rows of `features_a` and
/// `features_b`, summed over RBF kernels with the given bandwidths.
pub fn mmd2_rbf(tape: &Tape, features_a: Var, features_b: Var, bandwidths: &[f64]) -> Result<Var> {
    tape.mmd2_rbf(features_a, features_b, bandwidths)
}

/// `gamma * KL(lead || q) + (1 - gamma) * KL(assist || q)`.
pub fn co_teaching_kl(
    tape: &Tape,
    lead: &Tensor,
    assist: &Tensor,
    log_q: Var,
    gamma: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let lead_term = tape.kl_div(lead, log_q)?;
    let assist_term = tape.kl_div(assist, log_q)?;
    let a = tape.scale(lead_term, gamma)?;
    let b = tape.scale(assist_term, 1.0 - gamma)?;
    tape.add(a, b)
}

/// kdCT loss on a single-domain batch. The batch's host-domain teacher
/// leads with weight `gamma`, the other teacher assists with `1 - gamma`.
/// `gamma == 1` is the plain per-domain (KDDE) term.
pub fn kdct_batch_loss(
    tape: &Tape,
    batch: &Batch,
    teachers: &TeacherPair,
    student: &BoundMlp,
    gamma: f64,
    temperature: f64,
) -> Result<Var> {
    let domain = batch
        .domain
        .ok_or_else(|| Error::InvalidArgument("kdCT batch mixes source and target samples".into()))?;
    let lead = teacher_probs(teachers.for_domain(domain), &batch.x, batch.rows, temperature)?;
    let assist = teacher_probs(teachers.for_domain(domain.other()), &batch.x, batch.rows, temperature)?;
    let (logits, _) = student.forward(tape, batch.input(tape)?)?;
    let log_q = tape.log_softmax(logits, temperature)?;
    co_teaching_kl(tape, &lead, &assist, log_q, gamma)
}

/// `lambda[r] * x_s[r] + (1 - lambda[r]) * x_t[r]`, row by row.
pub fn mix_rows(a: &[f64], b: &[f64], cols: usize, lambdas: &[f64]) -> Vec<f64> {
    a.chunks_exact(cols)
        .zip(b.chunks_exact(cols))
        .zip(lambdas)
        .flat_map(|((ra, rb), &l)| ra.iter().zip(rb).map(move |(u, v)| l * u + (1.0 - l) * v))
        .collect()
}

/// miCT loss with one mixing coefficient for the whole batch.
pub fn mict_batch_loss(
    tape: &Tape,
    batch_s: &Batch,
    batch_t: &Batch,
    teachers: &TeacherPair,
    student: &BoundMlp,
    lambda: f64,
    temperature: f64,
) -> Result<Var> {
    let lambdas = vec![lambda; batch_s.rows];
    mict_batch_loss_per_sample(tape, batch_s, batch_t, teachers, student, &lambdas, temperature)
}

/// miCT loss with one mixing coefficient per row pair: the student sees
/// `x_m = l x_s + (1 - l) x_t` and is pulled towards
/// `l N_s(x_s) + (1 - l) N_t(x_t)`.
pub fn mict_batch_loss_per_sample(
    tape: &Tape,
    batch_s: &Batch,
    batch_t: &Batch,
    teachers: &TeacherPair,
    student: &BoundMlp,
    lambdas: &[f64],
    temperature: f64,
) -> Result<Var> {
    if batch_s.rows != batch_t.rows || batch_s.dim != batch_t.dim {
        return Err(Error::Shape {
            op: "mict_batch_loss",
            detail: format!(
                "source batch {}x{}, target batch {}x{}",
                batch_s.rows, batch_s.dim, batch_t.rows, batch_t.dim
            ),
        });
    }
    if lambdas.len() != batch_s.rows {
        return Err(Error::Shape {
            op: "mict_batch_loss",
            detail: format!("{} mixing coefficients for {} rows", lambdas.len(), batch_s.rows),
        });
    }
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {l}")));
    }
    let k = teachers.source.num_classes();
    let p_s = teachers.source.probs(&batch_s.x, batch_s.rows, temperature)?;
    let p_t = teachers.target.probs(&batch_t.x, batch_t.rows, temperature)?;
    let y_mix = Tensor::new(vec![batch_s.rows, k], mix_rows(&p_s, &p_t, k, lambdas))?;
    let x_mix = mix_rows(&batch_s.x, &batch_t.x, batch_s.dim, lambdas);
    let (logits, _) = student.forward(tape, tape.input(x_mix, batch_s.rows, batch_s.dim)?)?;
    let log_q = tape.log_softmax(logits, temperature)?;
    tape.kl_div(&y_mix, log_q)
}

/// MultiT: KL from the unweighted mean of both teachers' predictions.
pub fn multit_batch_loss(
    tape: &Tape,
    batch: &Batch,
    teachers: &TeacherPair,
    student: &BoundMlp,
    temperature: f64,
) -> Result<Var> {
    let k = teachers.source.num_classes();
    let p_s = teachers.source.probs(&batch.x, batch.rows, temperature)?;
    let p_t = teachers.target.probs(&batch.x, batch.rows, temperature)?;
    let avg = Tensor::new(
        vec![batch.rows, k],
        p_s.iter().zip(&p_t).map(|(a, b)| 0.5 * (a + b)).collect(),
    )?;
    let (logits, _) = student.forward(tape, batch.input(tape)?)?;
    let log_q = tape.log_softmax(logits, temperature)?;
    tape.kl_div(&avg, log_q)
}
