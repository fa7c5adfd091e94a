//! Training procedures: supervised source training, MMD-based adaptation
//! for the target teacher, and distillation into a fresh student (KDDE,
//! MultiT, kdCT, miCT and their CT combination).
//!
//! Every procedure derives its randomness from `TrainConfig::seed` through
//! named sub-streams, so a run is a pure function of its inputs. All
//! distillation methods share the `"distill"` stream: for one seed they
//! start from the same student and see the same batch order.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, kdct_batch_loss, mict_batch_loss_per_sample, mmd2_rbf, multit_batch_loss, Batch,
};
use crate::model::{predict, BoundMlp, MlpClassifier};
use crate::rng::{sample_beta, BetaParams, SeededRng};
use crate::synth::{Domain, DomainPairDataset};
use crate::tensor::{sgd_step, SgdParams, Tape, Var};

/// Bandwidth multipliers applied to the median pairwise feature distance.
pub const MMD_BANDWIDTH_MULTIPLIERS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// How the kdCT teacher weight is chosen each mini-batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GammaSetting {
    Beta { alpha: f64, beta: f64 },
    Fixed { value: f64 },
}

impl GammaSetting {
    pub fn validate(&self) -> Result<()> {
        match *self {
            GammaSetting::Beta { alpha, beta } => BetaParams::new(alpha, beta).map(|_| ()),
            GammaSetting::Fixed { value } if (0.0..=1.0).contains(&value) => Ok(()),
            GammaSetting::Fixed { value } => Err(Error::config(
                "gamma",
                format!("fixed value must lie in [0, 1], got {value}"),
            )),
        }
    }

    pub fn draw(&self, rng: &mut SeededRng) -> Result<f64> {
        match *self {
            GammaSetting::Beta { alpha, beta } => sample_beta(BetaParams { alpha, beta }, rng),
            GammaSetting::Fixed { value } => Ok(value),
        }
    }

    /// The eight settings of the gamma ablation, in table order.
    pub fn ablation_defaults() -> Vec<GammaSetting> {
        let b = |alpha, beta| GammaSetting::Beta { alpha, beta };
        let f = |value| GammaSetting::Fixed { value };
        vec![
            b(10.0, 1.0),
            b(5.0, 1.0),
            b(1.0, 1.0),
            b(1.0, 5.0),
            b(1.0, 10.0),
            f(0.5),
            f(0.909),
            f(1.0),
        ]
    }
}

impl fmt::Display for GammaSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GammaSetting::Beta { alpha, beta } => write!(f, "Beta({alpha},{beta})"),
            GammaSetting::Fixed { value } => write!(f, "fixed {value}"),
        }
    }
}

impl FromStr for GammaSetting {
    type Err = String;

    /// Accepts `beta:A,B` or `fixed:V`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| format!("expected `beta:A,B` or `fixed:V`, got `{s}`"))?;
        let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}"));
        let g = match kind.trim() {
            "beta" => {
                let (a, b) = rest
                    .split_once(',')
                    .ok_or_else(|| format!("expected `beta:A,B`, got `{s}`"))?;
                GammaSetting::Beta {
                    alpha: num(a)?,
                    beta: num(b)?,
                }
            }
            "fixed" => GammaSetting::Fixed { value: num(rest)? },
            other => return Err(format!("unknown gamma setting kind `{other}`")),
        };
        g.validate().map_err(|e| e.to_string())?;
        Ok(g)
    }
}

/// Learning-rate schedule; every decay multiplies by 0.1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// One decay at epoch `ceil(2/3 * epochs)`.
    SingleDecay,
    Every { epochs: usize },
    Constant,
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, epoch: usize, total_epochs: usize) -> f64 {
        match *self {
            LrSchedule::SingleDecay => {
                if epoch >= (2 * total_epochs).div_ceil(3) {
                    base * 0.1
                } else {
                    base
                }
            }
            LrSchedule::Every { epochs } => base * 0.1f64.powi((epoch / epochs.max(1)) as i32),
            LrSchedule::Constant => base,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    pub hidden: Vec<usize>,
    pub mmd_weight: f64,
    pub gamma: GammaSetting,
    pub lambda_params: BetaParams,
    pub per_sample_lambda: bool,
    pub temperature: f64,
    pub kdct_weight: f64,
    pub mict_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 0.0005,
            epochs: 30,
            batch_size: 32,
            lr_schedule: LrSchedule::SingleDecay,
            hidden: vec![64, 64],
            mmd_weight: 1.0,
            gamma: GammaSetting::Beta {
                alpha: 10.0,
                beta: 1.0,
            },
            lambda_params: BetaParams {
                alpha: 1.0,
                beta: 1.0,
            },
            per_sample_lambda: false,
            temperature: 1.0,
            kdct_weight: 1.0,
            mict_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |field, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive, got {v}")))
            }
        };
        let non_negative = |field, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be non-negative, got {v}")))
            }
        };
        positive("lr", self.lr)?;
        positive("temperature", self.temperature)?;
        non_negative("weight_decay", self.weight_decay)?;
        non_negative("mmd_weight", self.mmd_weight)?;
        non_negative("kdct_weight", self.kdct_weight)?;
        non_negative("mict_weight", self.mict_weight)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("hidden", "need at least one non-empty hidden layer"));
        }
        if let LrSchedule::Every { epochs: 0 } = self.lr_schedule {
            return Err(Error::config("lr_schedule", "decay period must be positive"));
        }
        self.gamma.validate()?;
        self.lambda_params
            .validate()
            .map_err(|e| Error::config("lambda_params", e.to_string()))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    fn layer_sizes(&self, data: &DomainPairDataset) -> Vec<usize> {
        let mut sizes = vec![data.dim];
        sizes.extend(&self.hidden);
        sizes.push(data.num_classes);
        sizes
    }

    fn sgd(&self, lr: f64) -> SgdParams {
        SgdParams {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// The two frozen domain-specific teachers.
#[derive(Clone, Debug)]
pub struct TeacherPair {
    pub source: MlpClassifier,
    pub target: MlpClassifier,
}

impl TeacherPair {
    pub fn new(source: MlpClassifier, target: MlpClassifier) -> Self {
        TeacherPair { source, target }
    }

    /// The teacher specialised for `domain`.
    pub fn for_domain(&self, domain: Domain) -> &MlpClassifier {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    fn validate(&self, data: &DomainPairDataset) -> Result<()> {
        for (name, t) in [("source", &self.source), ("target", &self.target)] {
            if t.input_dim() != data.dim || t.num_classes() != data.num_classes {
                return Err(Error::InvalidArgument(format!(
                    "{name} teacher is {:?}, data has d={} K={}",
                    t.layer_sizes(),
                    data.dim,
                    data.num_classes
                )));
            }
        }
        Ok(())
    }
}

/// Per-epoch means of each loss component, the sampled coefficients and
/// the source training accuracy. Components a trainer does not use are
/// `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub ce: Option<f64>,
    pub mmd: Option<f64>,
    pub kdct_source: Option<f64>,
    pub kdct_target: Option<f64>,
    pub mict: Option<f64>,
    pub multit: Option<f64>,
    pub total: f64,
    pub gammas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub train_acc_source: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub trainer: String,
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,ce,mmd,kdct_source,kdct_target,mict,multit,total,gamma_mean,lambda_mean,train_acc_source";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                String::new()
            } else {
                (v.iter().sum::<f64>() / v.len() as f64).to_string()
            }
        };
        let mut out = Vec::new();
        writeln!(out, "{}", Self::CSV_HEADER).expect("vec write");
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.lr,
                opt(r.ce),
                opt(r.mmd),
                opt(r.kdct_source),
                opt(r.kdct_target),
                opt(r.mict),
                opt(r.multit),
                r.total,
                mean(&r.gammas),
                mean(&r.lambdas),
                r.train_acc_source
            )
            .expect("vec write");
        }
        String::from_utf8(out).expect("ascii")
    }

    pub fn epoch_totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total).collect()
    }
}

/// A trained network and its log.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: MlpClassifier,
    pub log: TrainLog,
}

/// Loss components of one step, plus its coefficients.
#[derive(Default)]
struct StepTerms {
    ce: Option<f64>,
    mmd: Option<f64>,
    kdct_source: Option<f64>,
    kdct_target: Option<f64>,
    mict: Option<f64>,
    multit: Option<f64>,
    gamma: Option<f64>,
    lambdas: Vec<f64>,
}

#[derive(Default)]
struct Running {
    steps: usize,
    total: f64,
    ce: Option<f64>,
    mmd: Option<f64>,
    kdct_source: Option<f64>,
    kdct_target: Option<f64>,
    mict: Option<f64>,
    multit: Option<f64>,
    gammas: Vec<f64>,
    lambdas: Vec<f64>,
}

impl Running {
    fn add(&mut self, total: f64, t: StepTerms) {
        fn acc(slot: &mut Option<f64>, v: Option<f64>) {
            if let Some(v) = v {
                *slot = Some(slot.unwrap_or(0.0) + v);
            }
        }
        self.steps += 1;
        self.total += total;
        acc(&mut self.ce, t.ce);
        acc(&mut self.mmd, t.mmd);
        acc(&mut self.kdct_source, t.kdct_source);
        acc(&mut self.kdct_target, t.kdct_target);
        acc(&mut self.mict, t.mict);
        acc(&mut self.multit, t.multit);
        self.gammas.extend(t.gamma);
        if !t.lambdas.is_empty() {
            self.lambdas.push(t.lambdas.iter().sum::<f64>() / t.lambdas.len() as f64);
        }
    }

    fn finish(self, epoch: usize, lr: f64, train_acc_source: f64) -> EpochRecord {
        let n = self.steps.max(1) as f64;
        let m = |v: Option<f64>| v.map(|v| v / n);
        EpochRecord {
            epoch,
            lr,
            ce: m(self.ce),
            mmd: m(self.mmd),
            kdct_source: m(self.kdct_source),
            kdct_target: m(self.kdct_target),
            mict: m(self.mict),
            multit: m(self.multit),
            total: self.total / n,
            gammas: self.gammas,
            lambdas: self.lambdas,
            train_acc_source,
        }
    }
}

/// Indices of mini-batch `step`: a window of `size` over `order`, wrapping
/// around so every batch is full.
fn window(order: &[usize], step: usize, size: usize) -> Vec<usize> {
    (0..size).map(|j| order[(step * size + j) % order.len()]).collect()
}

/// Shared SGD loop. `paired` loops draw a source and a target batch per
/// step; otherwise only source batches are drawn. `step_fn` builds the
/// loss on the given tape.
fn fit<F>(
    student: &mut MlpClassifier,
    data: &DomainPairDataset,
    config: &TrainConfig,
    rng: &SeededRng,
    trainer: &str,
    paired: bool,
    mut step_fn: F,
) -> Result<TrainLog>
where
    F: FnMut(&Tape, &BoundMlp, &Batch, Option<&Batch>) -> Result<(Var, StepTerms)>,
{
    let n_s = data.source_train.len();
    let n_t = data.target_train.len();
    if n_s == 0 || (paired && n_t == 0) {
        return Err(Error::InvalidArgument(format!("{trainer}: empty training set")));
    }
    let b = config.batch_size;
    let steps = if paired { n_s.max(n_t) } else { n_s }.div_ceil(b);
    let mut shuffle_rng = rng.split("shuffle");
    let mut velocity = Vec::new();
    let mut log = TrainLog {
        trainer: trainer.to_string(),
        records: Vec::with_capacity(config.epochs),
    };

    for epoch in 0..config.epochs {
        let lr = config.lr_schedule.lr_at(config.lr, epoch, config.epochs);
        let mut src: Vec<usize> = (0..n_s).collect();
        shuffle_rng.shuffle(&mut src);
        let tgt = if paired {
            let mut t: Vec<usize> = (0..n_t).collect();
            shuffle_rng.shuffle(&mut t);
            Some(t)
        } else {
            None
        };
        let mut running = Running::default();
        for step in 0..steps {
            let bs = Batch::gather(&data.source_train, &window(&src, step, b))?;
            let bt = match &tgt {
                Some(t) => Some(Batch::gather(&data.target_train, &window(t, step, b))?),
                None => None,
            };
            let tape = Tape::new();
            let bound = student.bind(&tape);
            let (loss, terms) = step_fn(&tape, &bound, &bs, bt.as_ref())?;
            let value = tape.scalar(loss)?;
            if !value.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{trainer}: loss diverged at epoch {epoch}, step {step}"
                )));
            }
            tape.backward(loss, student.params_mut().iter_mut())?;
            sgd_step(student.params_mut(), &mut velocity, config.sgd(lr))?;
            running.add(value, terms);
        }
        let acc = source_train_accuracy(student, data)?;
        log.records.push(running.finish(epoch, lr, acc));
    }
    Ok(log)
}

fn source_train_accuracy(model: &MlpClassifier, data: &DomainPairDataset) -> Result<f64> {
    let preds = predict(model, &data.source_train)?;
    let correct = preds
        .iter()
        .zip(&data.source_train)
        .filter(|(p, s)| Some(**p) == s.label())
        .count();
    Ok(correct as f64 / data.source_train.len() as f64)
}

fn fresh_student(config: &TrainConfig, data: &DomainPairDataset, rng: &SeededRng) -> Result<MlpClassifier> {
    MlpClassifier::init(&config.layer_sizes(data), &mut rng.split("init"))
}

/// Supervised cross-entropy on the labeled source set: the source teacher.
pub fn train_source(data: &DomainPairDataset, config: &TrainConfig) -> Result<TrainedModel> {
    config.validate()?;
    let rng = SeededRng::new(config.seed).split("source");
    let mut model = fresh_student(config, data, &rng)?;
    let log = fit(&mut model, data, config, &rng, "source", false, |tape, net, bs, _| {
        let labels = bs
            .labels
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("unlabeled source batch".into()))?;
        let (logits, _) = net.forward(tape, tape.input(bs.x.clone(), bs.rows, bs.dim)?)?;
        let ce = cross_entropy(tape, logits, labels)?;
        let terms = StepTerms {
            ce: Some(tape.scalar(ce)?),
            ..StepTerms::default()
        };
        Ok((ce, terms))
    })?;
    Ok(TrainedModel { model, log })
}

/// Median of the pairwise Euclidean distances between rows of `x`.
fn median_pairwise_distance(x: &[f64], cols: usize) -> f64 {
    let rows: Vec<&[f64]> = x.chunks_exact(cols).collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len() / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let s: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d.push(s.sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    if d.len() % 2 == 1 {
        d[mid]
    } else {
        0.5 * (d[mid - 1] + d[mid])
    }
}

/// MMD bandwidths from the pooled features of the first batch pair.
fn mmd_bandwidths(model: &MlpClassifier, bs: &Batch, bt: &Batch) -> Result<Vec<f64>> {
    let (_, fs) = model.infer(&bs.x, bs.rows)?;
    let (_, ft) = model.infer(&bt.x, bt.rows)?;
    let mut pooled = fs;
    pooled.extend(ft);
    let median = median_pairwise_distance(&pooled, model.feature_dim());
    let base = if median > 0.0 && median.is_finite() { median } else { 1.0 };
    Ok(MMD_BANDWIDTH_MULTIPLIERS.iter().map(|m| m * base).collect())
}

/// DDC-style adaptation: source cross-entropy plus `mmd_weight` times the
/// squared MMD between source and target penultimate features.
pub fn train_uda_mmd(data: &DomainPairDataset, config: &TrainConfig) -> Result<TrainedModel> {
    config.validate()?;
    if config.mmd_weight == 0.0 {
        log::warn!("mmd_weight is 0: MMD adaptation degenerates to source-only training");
    }
    let rng = SeededRng::new(config.seed).split("uda");
    let mut model = fresh_student(config, data, &rng)?;
    let mut bandwidths: Option<Vec<f64>> = None;
    let snapshot = model.clone();
    let log = fit(&mut model, data, config, &rng, "uda_mmd", true, |tape, net, bs, bt| {
        let bt = bt.expect("paired loop");
        let labels = bs
            .labels
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("unlabeled source batch".into()))?;
        if bandwidths.is_none() {
            bandwidths = Some(mmd_bandwidths(&snapshot, bs, bt)?);
        }
        let bw = bandwidths.as_deref().expect("set above");
        let (logits_s, feat_s) = net.forward(tape, tape.input(bs.x.clone(), bs.rows, bs.dim)?)?;
        let (_, feat_t) = net.forward(tape, tape.input(bt.x.clone(), bt.rows, bt.dim)?)?;
        let ce = cross_entropy(tape, logits_s, labels)?;
        let mmd = mmd2_rbf(tape, feat_s, feat_t, bw)?;
        let weighted = tape.scale(mmd, config.mmd_weight)?;
        let total = tape.add(ce, weighted)?;
        let terms = StepTerms {
            ce: Some(tape.scalar(ce)?),
            mmd: Some(tape.scalar(mmd)?),
            ..StepTerms::default()
        };
        Ok((total, terms))
    })?;
    Ok(TrainedModel { model, log })
}

/// Co-teaching objective of one distillation run.
#[derive(Clone, Copy, Debug)]
struct CoTeaching {
    gamma: GammaSetting,
    kdct_weight: f64,
    mict_weight: f64,
}

fn co_teach(
    teachers: &TeacherPair,
    data: &DomainPairDataset,
    config: &TrainConfig,
    objective: CoTeaching,
    trainer: &str,
) -> Result<TrainedModel> {
    config.validate()?;
    objective.gamma.validate()?;
    teachers.validate(data)?;
    let rng = SeededRng::new(config.seed).split("distill");
    let mut student = fresh_student(config, data, &rng)?;
    let mut gamma_rng = rng.split("gamma");
    let mut lambda_rng = rng.split("lambda");
    let t = config.temperature;
    let log = fit(&mut student, data, config, &rng, trainer, true, |tape, net, bs, bt| {
        let bt = bt.expect("paired loop");
        let gamma = objective.gamma.draw(&mut gamma_rng)?;
        let mut terms = StepTerms {
            gamma: Some(gamma),
            ..StepTerms::default()
        };
        let mut total: Option<Var> = None;
        if objective.kdct_weight > 0.0 {
            let ls = kdct_batch_loss(tape, bs, teachers, net, gamma, t)?;
            let lt = kdct_batch_loss(tape, bt, teachers, net, gamma, t)?;
            terms.kdct_source = Some(tape.scalar(ls)?);
            terms.kdct_target = Some(tape.scalar(lt)?);
            let sum = tape.add(ls, lt)?;
            total = Some(tape.scale(sum, objective.kdct_weight)?);
        }
        if objective.mict_weight > 0.0 {
            let lambdas = if config.per_sample_lambda {
                (0..bs.rows)
                    .map(|_| sample_beta(config.lambda_params, &mut lambda_rng))
                    .collect::<Result<Vec<f64>>>()?
            } else {
                vec![sample_beta(config.lambda_params, &mut lambda_rng)?; bs.rows]
            };
            let lm = mict_batch_loss_per_sample(tape, bs, bt, teachers, net, &lambdas, t)?;
            terms.mict = Some(tape.scalar(lm)?);
            terms.lambdas = lambdas;
            let weighted = tape.scale(lm, objective.mict_weight)?;
            total = Some(match total {
                Some(k) => tape.add(k, weighted)?,
                None => weighted,
            });
        }
        let total = total.ok_or_else(|| {
            Error::config("kdct_weight", "kdct_weight and mict_weight are both zero")
        })?;
        Ok((total, terms))
    })?;
    Ok(TrainedModel {
        model: student,
        log,
    })
}

/// KDDE: each domain's batch is distilled from its own teacher only.
/// Identical to [`ct_distill`] with gamma fixed at 1 and no miCT term.
pub fn kdde_distill(
    teachers: &TeacherPair,
    data: &DomainPairDataset,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    co_teach(
        teachers,
        data,
        config,
        CoTeaching {
            gamma: GammaSetting::Fixed { value: 1.0 },
            kdct_weight: 1.0,
            mict_weight: 0.0,
        },
        "kdde",
    )
}

/// CT: `kdct_weight * (L_kdct(source batch) + L_kdct(target batch)) +
/// mict_weight * L_mict`, with gamma drawn once per step from
/// `config.gamma` and the mixing coefficient from `config.lambda_params`.
pub fn ct_distill(
    teachers: &TeacherPair,
    data: &DomainPairDataset,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    let trainer = match (config.kdct_weight > 0.0, config.mict_weight > 0.0) {
        (true, false) => "kdct",
        (false, true) => "mict",
        _ => "ct",
    };
    co_teach(
        teachers,
        data,
        config,
        CoTeaching {
            gamma: config.gamma,
            kdct_weight: config.kdct_weight,
            mict_weight: config.mict_weight,
        },
        trainer,
    )
}

/// MultiT: both domains' batches are distilled from the averaged teacher.
pub fn multit_distill(
    teachers: &TeacherPair,
    data: &DomainPairDataset,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    teachers.validate(data)?;
    let rng = SeededRng::new(config.seed).split("distill");
    let mut student = fresh_student(config, data, &rng)?;
    let t = config.temperature;
    let log = fit(&mut student, data, config, &rng, "multit", true, |tape, net, bs, bt| {
        let bt = bt.expect("paired loop");
        let ls = multit_batch_loss(tape, bs, teachers, net, t)?;
        let lt = multit_batch_loss(tape, bt, teachers, net, t)?;
        let total = tape.add(ls, lt)?;
        let terms = StepTerms {
            multit: Some(tape.scalar(total)?),
            ..StepTerms::default()
        };
        Ok((total, terms))
    })?;
    Ok(TrainedModel {
        model: student,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_domain_pair, DomainShiftConfig};

    fn tiny_data(seed: u64) -> DomainPairDataset {
        generate_domain_pair(&DomainShiftConfig {
            num_classes: 3,
            n_source: 60,
            n_target: 60,
            n_test: 30,
            rotation_angle: 0.3,
            seed,
            ..DomainShiftConfig::default()
        })
        .unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            hidden: vec![8, 8],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedules() {
        let s = LrSchedule::SingleDecay;
        assert_eq!(s.lr_at(1.0, 19, 30), 1.0);
        assert!((s.lr_at(1.0, 20, 30) - 0.1).abs() < 1e-15);
        assert_eq!(s.lr_at(1.0, 1, 2), 1.0);
        assert!((s.lr_at(1.0, 2, 3) - 0.1).abs() < 1e-15);
        let e = LrSchedule::Every { epochs: 30 };
        assert_eq!(e.lr_at(0.005, 29, 100), 0.005);
        assert!((e.lr_at(0.005, 60, 100) - 0.00005).abs() < 1e-18);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = |c: TrainConfig| c.validate().unwrap_err();
        assert!(matches!(bad(TrainConfig { epochs: 0, ..TrainConfig::default() }), Error::Config { field: "epochs", .. }));
        assert!(matches!(bad(TrainConfig { batch_size: 1, ..TrainConfig::default() }), Error::Config { field: "batch_size", .. }));
        assert!(matches!(bad(TrainConfig { hidden: vec![], ..TrainConfig::default() }), Error::Config { field: "hidden", .. }));
        assert!(bad(TrainConfig { lr: 0.0, ..TrainConfig::default() }).to_string().contains("lr"));
    }

    #[test]
    fn zero_hidden_layers_rejected() {
        let cfg = TrainConfig {
            hidden: vec![],
            ..tiny_config()
        };
        assert!(train_source(&tiny_data(0), &cfg).is_err());
    }

    #[test]
    fn gamma_setting_parsing() {
        assert_eq!(
            "beta:10,1".parse::<GammaSetting>().unwrap(),
            GammaSetting::Beta { alpha: 10.0, beta: 1.0 }
        );
        assert_eq!(
            "fixed:0.909".parse::<GammaSetting>().unwrap(),
            GammaSetting::Fixed { value: 0.909 }
        );
        assert!("fixed:1.5".parse::<GammaSetting>().is_err());
        assert!("beta:0,1".parse::<GammaSetting>().is_err());
        assert_eq!(GammaSetting::ablation_defaults().len(), 8);
        assert_eq!(GammaSetting::Beta { alpha: 10.0, beta: 1.0 }.to_string(), "Beta(10,1)");
    }

    #[test]
    fn median_distance() {
        // rows 0, 1, 3 on a line: distances 1, 3, 2
        assert_eq!(median_pairwise_distance(&[0.0, 1.0, 3.0], 1), 2.0);
    }

    #[test]
    fn window_wraps() {
        assert_eq!(window(&[4, 5, 6], 1, 2), vec![6, 4]);
    }

    #[test]
    fn logs_one_record_per_epoch() {
        let data = tiny_data(1);
        let cfg = tiny_config();
        let n_s = train_source(&data, &cfg).unwrap();
        assert_eq!(n_s.log.records.len(), 3);
        assert!(n_s.log.records.iter().all(|r| r.ce.is_some() && r.mmd.is_none()));
        let csv = n_s.log.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with(TrainLog::CSV_HEADER));
    }

    #[test]
    fn ct_logs_gamma_and_lambda_per_step() {
        let data = tiny_data(2);
        let cfg = tiny_config();
        let teachers = TeacherPair::new(
            train_source(&data, &cfg).unwrap().model,
            train_uda_mmd(&data, &cfg).unwrap().model,
        );
        let ct = ct_distill(&teachers, &data, &cfg).unwrap();
        let r = &ct.log.records[0];
        assert_eq!(r.gammas.len(), 4);
        assert_eq!(r.lambdas.len(), 4);
        assert!(r.gammas.iter().all(|g| *g > 0.0 && *g < 1.0));
        assert!(r.kdct_source.is_some() && r.kdct_target.is_some() && r.mict.is_some());
    }

    #[test]
    fn both_weights_zero_is_rejected() {
        let data = tiny_data(3);
        let cfg = tiny_config();
        let teachers = TeacherPair::new(
            train_source(&data, &cfg).unwrap().model,
            train_source(&data, &cfg).unwrap().model,
        );
        let off = TrainConfig {
            kdct_weight: 0.0,
            mict_weight: 0.0,
            ..cfg
        };
        assert!(ct_distill(&teachers, &data, &off).is_err());
    }
}
