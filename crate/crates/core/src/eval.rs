//! Evaluation protocols: per-domain and expanded-domain accuracy, the
//! teacher-consistency split, the cross-domain ambiguity rate, and the
//! gamma ablation sweep. Nothing here mutates a model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict, MlpClassifier};
use crate::synth::{DomainPairDataset, Sample};
use crate::train::{ct_distill, GammaSetting, TeacherPair, TrainConfig};

fn labels(testset: &[Sample]) -> Result<Vec<usize>> {
    testset
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.label()
                .ok_or_else(|| Error::InvalidArgument(format!("sample {i} is unlabeled")))
        })
        .collect()
}

/// Fraction of `testset` classified correctly.
pub fn accuracy(model: &MlpClassifier, testset: &[Sample]) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let y = labels(testset)?;
    let p = predict(model, testset)?;
    let correct = p.iter().zip(&y).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / testset.len() as f64)
}

fn per_class(model: &MlpClassifier, testset: &[Sample], k: usize) -> Result<Vec<f64>> {
    let y = labels(testset)?;
    let p = predict(model, testset)?;
    let mut hit = vec![0usize; k];
    let mut tot = vec![0usize; k];
    for (pred, label) in p.iter().zip(&y) {
        tot[*label] += 1;
        if pred == label {
            hit[*label] += 1;
        }
    }
    Ok(hit
        .iter()
        .zip(&tot)
        .map(|(h, t)| if *t == 0 { f64::NAN } else { *h as f64 / *t as f64 })
        .collect())
}

/// Source, target and expanded-domain accuracy of one model.
///
/// `acc_expanded` is the mean of the two domain accuracies;
/// `acc_expanded_micro` is plain accuracy over the union of both test sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_source: f64,
    pub acc_target: f64,
    pub acc_expanded: f64,
    pub acc_expanded_micro: f64,
    pub per_class_source: Vec<f64>,
    pub per_class_target: Vec<f64>,
    pub n_source_test: usize,
    pub n_target_test: usize,
}

impl EvalReport {
    pub fn from_accuracies(acc_source: f64, acc_target: f64, n_source_test: usize, n_target_test: usize) -> Self {
        let total = (n_source_test + n_target_test) as f64;
        EvalReport {
            acc_source,
            acc_target,
            acc_expanded: (acc_source + acc_target) / 2.0,
            acc_expanded_micro: if total > 0.0 {
                (acc_source * n_source_test as f64 + acc_target * n_target_test as f64) / total
            } else {
                f64::NAN
            },
            per_class_source: Vec::new(),
            per_class_target: Vec::new(),
            n_source_test,
            n_target_test,
        }
    }
}

pub fn evaluate_ude(model: &MlpClassifier, dataset: &DomainPairDataset) -> Result<EvalReport> {
    let acc_s = accuracy(model, &dataset.source_test)?;
    let acc_t = accuracy(model, &dataset.target_test)?;
    let mut report = EvalReport::from_accuracies(
        acc_s,
        acc_t,
        dataset.source_test.len(),
        dataset.target_test.len(),
    );
    report.per_class_source = per_class(model, &dataset.source_test, dataset.num_classes)?;
    report.per_class_target = per_class(model, &dataset.target_test, dataset.num_classes)?;
    Ok(report)
}

/// Partition of a test set by whether the two teachers predict the same
/// class. Ids index into the test set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencySplit {
    pub consistent_ids: Vec<usize>,
    pub inconsistent_ids: Vec<usize>,
}

impl ConsistencySplit {
    pub fn len(&self) -> usize {
        self.consistent_ids.len() + self.inconsistent_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn consistency_split(
    n_s: &MlpClassifier,
    n_t: &MlpClassifier,
    testset: &[Sample],
) -> Result<ConsistencySplit> {
    let ps = predict(n_s, testset)?;
    let pt = predict(n_t, testset)?;
    let (consistent_ids, inconsistent_ids): (Vec<usize>, Vec<usize>) =
        (0..testset.len()).partition(|&i| ps[i] == pt[i]);
    Ok(ConsistencySplit {
        consistent_ids,
        inconsistent_ids,
    })
}

/// Accuracy on each side of a consistency split; an empty group is `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub consistent: Option<f64>,
    pub inconsistent: Option<f64>,
}

pub fn group_accuracy(
    model: &MlpClassifier,
    split: &ConsistencySplit,
    testset: &[Sample],
) -> Result<GroupAccuracy> {
    if split.len() != testset.len() {
        return Err(Error::InvalidArgument(format!(
            "split covers {} samples, test set has {}",
            split.len(),
            testset.len()
        )));
    }
    let mut seen = vec![false; testset.len()];
    for &i in split.consistent_ids.iter().chain(&split.inconsistent_ids) {
        if i >= testset.len() || std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidArgument(format!(
                "split id {i} does not belong to this test set"
            )));
        }
    }
    let y = labels(testset)?;
    let p = predict(model, testset)?;
    let group = |ids: &[usize]| {
        (!ids.is_empty())
            .then(|| ids.iter().filter(|&&i| p[i] == y[i]).count() as f64 / ids.len() as f64)
    };
    Ok(GroupAccuracy {
        consistent: group(&split.consistent_ids),
        inconsistent: group(&split.inconsistent_ids),
    })
}

/// Percentage of `testset_a` that `model_a` gets wrong and `model_b` gets right.
pub fn ambiguity_rate(
    model_a: &MlpClassifier,
    model_b: &MlpClassifier,
    testset_a: &[Sample],
) -> Result<f64> {
    if testset_a.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let y = labels(testset_a)?;
    let pa = predict(model_a, testset_a)?;
    let pb = predict(model_b, testset_a)?;
    let n = (0..y.len()).filter(|&i| pa[i] != y[i] && pb[i] == y[i]).count();
    Ok(100.0 * n as f64 / testset_a.len() as f64)
}

/// One row of the gamma ablation. `seed == None` marks the seed average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: GammaSetting,
    pub seed: Option<u64>,
    pub acc_source: f64,
    pub acc_target: f64,
    pub acc_expanded: f64,
}

/// kdCT-only distillation (`mict_weight` forced to 0) for every gamma
/// setting and seed, followed by a seed-averaged row per setting. Rows are
/// ordered by setting (input order), then seed (input order).
pub fn gamma_ablation(
    teachers: &TeacherPair,
    data: &DomainPairDataset,
    settings: &[GammaSetting],
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("gamma ablation needs at least one seed".into()));
    }
    let jobs: Vec<(usize, GammaSetting, u64)> = settings
        .iter()
        .enumerate()
        .flat_map(|(i, s)| seeds.iter().map(move |&seed| (i, *s, seed)))
        .collect();
    let reports = jobs
        .par_iter()
        .map(|&(_, setting, seed)| {
            let cfg = TrainConfig {
                gamma: setting,
                mict_weight: 0.0,
                seed,
                ..config.clone()
            };
            let student = ct_distill(teachers, data, &cfg)?;
            evaluate_ude(&student.model, data)
        })
        .collect::<Result<Vec<EvalReport>>>()?;

    let mut rows = Vec::with_capacity(settings.len() * (seeds.len() + 1));
    for (si, chunk) in reports.chunks(seeds.len()).enumerate() {
        let setting = settings[si];
        for (seed, r) in seeds.iter().zip(chunk) {
            rows.push(AblationRow {
                setting,
                seed: Some(*seed),
                acc_source: r.acc_source,
                acc_target: r.acc_target,
                acc_expanded: r.acc_expanded,
            });
        }
        let n = chunk.len() as f64;
        let mean = |f: fn(&EvalReport) -> f64| chunk.iter().map(f).sum::<f64>() / n;
        rows.push(AblationRow {
            setting,
            seed: None,
            acc_source: mean(|r| r.acc_source),
            acc_target: mean(|r| r.acc_target),
            acc_expanded: mean(|r| r.acc_expanded),
        });
    }
    Ok(rows)
}
