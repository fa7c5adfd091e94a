//! The multi-seed pipeline: data, teachers, every requested distillation,
//! evaluation of each model and the cross-seed aggregate.

use std::time::Instant;

use anyhow::{Context, Result};
use coteach_core::{
    ambiguity_rate, bayes_oracle_accuracy, consistency_split, ct_distill, evaluate_ude,
    group_accuracy, kdde_distill, multit_distill, ConsistencySplit, DomainPairDataset, EvalReport,
    GroupAccuracy, MlpClassifier, Sample, TeacherPair, TrainConfig,
};
use serde::Serialize;

use crate::config::{ExperimentConfig, Method};
use crate::manifest::{Recorder, RunManifest};
use crate::run::{for_each_seed, pair, require_pair, RunOptions, SeedRun, Shared};

pub const MANIFEST: &str = "manifest.json";
pub const AGGREGATE: &str = "aggregate.csv";
pub const AGGREGATE_HEADER: [&str; 9] = [
    "method",
    "seed",
    "acc_source",
    "acc_target",
    "acc_expanded",
    "acc_consistent",
    "acc_inconsistent",
    "ambiguity_s_to_t",
    "ambiguity_t_to_s",
];

/// One model's numbers for one seed. Group accuracies are over the
/// expanded test set split by teacher agreement; `ambiguity_s_to_t` is the
/// percentage of source test samples this model gets wrong and the target
/// teacher gets right, `ambiguity_t_to_s` the mirror image.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodRow {
    pub method: Method,
    pub seed: u64,
    pub acc_source: f64,
    pub acc_target: f64,
    pub acc_expanded: f64,
    pub acc_consistent: Option<f64>,
    pub acc_inconsistent: Option<f64>,
    pub ambiguity_s_to_t: Option<f64>,
    pub ambiguity_t_to_s: Option<f64>,
}

#[derive(Serialize)]
struct MethodSummary<'a> {
    method: Method,
    report: &'a EvalReport,
    groups_source: Option<GroupAccuracy>,
    groups_target: Option<GroupAccuracy>,
    groups_expanded: Option<GroupAccuracy>,
    ambiguity_s_to_t: Option<f64>,
    ambiguity_t_to_s: Option<f64>,
}

#[derive(Serialize)]
struct SeedSummary<'a> {
    seed: u64,
    dataset_digest: &'a str,
    bayes_oracle: Option<(f64, f64)>,
    consistent_expanded: Option<usize>,
    inconsistent_expanded: Option<usize>,
    methods: Vec<MethodSummary<'a>>,
}

/// Consistency splits of the three test sets under the two teachers.
struct Splits {
    source: ConsistencySplit,
    target: ConsistencySplit,
    expanded: ConsistencySplit,
}

struct Evaluation {
    report: EvalReport,
    groups: Option<[GroupAccuracy; 3]>,
    ambiguity: Option<(f64, f64)>,
}

fn evaluate(
    model: &MlpClassifier,
    data: &DomainPairDataset,
    expanded: &[Sample],
    teachers: Option<(&TeacherPair, &Splits)>,
) -> Result<Evaluation> {
    let report = evaluate_ude(model, data)?;
    let (groups, ambiguity) = match teachers {
        Some((t, s)) => (
            Some([
                group_accuracy(model, &s.source, &data.source_test)?,
                group_accuracy(model, &s.target, &data.target_test)?,
                group_accuracy(model, &s.expanded, expanded)?,
            ]),
            Some((
                ambiguity_rate(model, &t.target, &data.source_test)?,
                ambiguity_rate(model, &t.source, &data.target_test)?,
            )),
        ),
        None => (None, None),
    };
    Ok(Evaluation {
        report,
        groups,
        ambiguity,
    })
}

/// Train config for a distillation method.
pub fn method_config(method: Method, base: &TrainConfig) -> TrainConfig {
    let mut cfg = base.clone();
    match method {
        Method::Kdct => cfg.mict_weight = 0.0,
        Method::Mict => cfg.kdct_weight = 0.0,
        _ => {}
    }
    cfg
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn report_csv(rows: &[(Method, &Evaluation)], data: &DomainPairDataset, splits: Option<&Splits>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "domain", "group", "accuracy", "n"])?;
    let n_s = data.source_test.len();
    let n_t = data.target_test.len();
    for (method, ev) in rows {
        let r = &ev.report;
        let m = method.as_str();
        w.write_record([m, "source", "all", &r.acc_source.to_string(), &n_s.to_string()])?;
        w.write_record([m, "target", "all", &r.acc_target.to_string(), &n_t.to_string()])?;
        w.write_record([m, "expanded", "all", &r.acc_expanded.to_string(), &(n_s + n_t).to_string()])?;
        w.write_record([m, "expanded_micro", "all", &r.acc_expanded_micro.to_string(), &(n_s + n_t).to_string()])?;
        if let (Some(groups), Some(s)) = (&ev.groups, splits) {
            for ((domain, g), split) in ["source", "target", "expanded"]
                .iter()
                .zip(groups)
                .zip([&s.source, &s.target, &s.expanded])
            {
                let sizes = [split.consistent_ids.len(), split.inconsistent_ids.len()];
                for ((name, acc), n) in [("consistent", g.consistent), ("inconsistent", g.inconsistent)]
                    .into_iter()
                    .zip(sizes)
                {
                    w.write_record([m, domain, name, &fmt_opt(acc), &n.to_string()])?;
                }
            }
        }
    }
    Ok(w.into_inner().context("csv buffer")?)
}

/// One seed of the pipeline.
fn run_seed(run: &mut SeedRun<'_>) -> Result<Vec<MethodRow>> {
    let methods = run.shared.config.methods.clone();
    let data = run.data()?;
    let distill = methods.iter().any(|m| !m.is_teacher());
    let (ns, nt) = run.teachers(
        &data,
        distill || methods.contains(&Method::Source),
        distill || methods.contains(&Method::UdaMmd),
    )?;
    let teachers = pair(&ns, &nt);
    let base = run.train_config();

    let mut models: Vec<(Method, MlpClassifier)> = Vec::new();
    for &method in &methods {
        let model = match method {
            Method::Source => ns.clone().expect("trained above"),
            Method::UdaMmd => nt.clone().expect("trained above"),
            Method::Kdde | Method::Multit | Method::Kdct | Method::Mict | Method::Ct => {
                let tp = require_pair(&ns, &nt)?;
                let cfg = method_config(method, &base);
                let d = &data.data;
                run.stage(method, &cfg, &data, Some(&tp), || match method {
                    Method::Kdde => kdde_distill(&tp, d, &cfg),
                    Method::Multit => multit_distill(&tp, d, &cfg),
                    _ => ct_distill(&tp, d, &cfg),
                })?
            }
        };
        models.push((method, model));
    }

    let start = Instant::now();
    let expanded = data.data.expanded_test();
    let splits = match &teachers {
        Some(t) => Some(Splits {
            source: consistency_split(&t.source, &t.target, &data.data.source_test)?,
            target: consistency_split(&t.source, &t.target, &data.data.target_test)?,
            expanded: consistency_split(&t.source, &t.target, &expanded)?,
        }),
        None => None,
    };
    let with_teachers = teachers.as_ref().zip(splits.as_ref());
    let evals: Vec<(Method, Evaluation)> = models
        .iter()
        .map(|(m, model)| Ok((*m, evaluate(model, &data.data, &expanded, with_teachers)?)))
        .collect::<Result<_>>()?;

    let refs: Vec<(Method, &Evaluation)> = evals.iter().map(|(m, e)| (*m, e)).collect();
    let report_rel = run.rel("report.csv");
    run.rec.write(&report_rel, "report", &report_csv(&refs, &data.data, splits.as_ref())?)?;

    let bayes = data
        .data
        .generator_metadata
        .is_some()
        .then(|| bayes_oracle_accuracy(&data.data))
        .transpose()?;
    let summary = SeedSummary {
        seed: run.seed,
        dataset_digest: &data.digest,
        bayes_oracle: bayes,
        consistent_expanded: splits.as_ref().map(|s| s.expanded.consistent_ids.len()),
        inconsistent_expanded: splits.as_ref().map(|s| s.expanded.inconsistent_ids.len()),
        methods: evals
            .iter()
            .map(|(m, e)| MethodSummary {
                method: *m,
                report: &e.report,
                groups_source: e.groups.as_ref().map(|g| g[0]),
                groups_target: e.groups.as_ref().map(|g| g[1]),
                groups_expanded: e.groups.as_ref().map(|g| g[2]),
                ambiguity_s_to_t: e.ambiguity.map(|a| a.0),
                ambiguity_t_to_s: e.ambiguity.map(|a| a.1),
            })
            .collect(),
    };
    let summary_rel = run.rel("summary.json");
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    run.rec.write(&summary_rel, "summary", json.as_bytes())?;
    run.stages.push(crate::manifest::StageRecord {
        seed: run.seed,
        stage: "evaluate".into(),
        checkpoint: None,
        log: None,
        report: Some(report_rel),
        wall_ms: start.elapsed().as_millis() as u64,
        resumed: false,
    });

    Ok(evals
        .into_iter()
        .map(|(method, e)| MethodRow {
            method,
            seed: run.seed,
            acc_source: e.report.acc_source,
            acc_target: e.report.acc_target,
            acc_expanded: e.report.acc_expanded,
            acc_consistent: e.groups.as_ref().and_then(|g| g[2].consistent),
            acc_inconsistent: e.groups.as_ref().and_then(|g| g[2].inconsistent),
            ambiguity_s_to_t: e.ambiguity.map(|a| a.0),
            ambiguity_t_to_s: e.ambiguity.map(|a| a.1),
        })
        .collect())
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1).then(|| {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    });
    (Some(mean), std)
}

/// Per-seed rows for each method, followed by a `mean` row and, with two
/// or more seeds, a `std` row (sample standard deviation). Group and
/// ambiguity statistics average over the seeds where they exist.
pub fn aggregate_csv(methods: &[Method], rows: &[MethodRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(AGGREGATE_HEADER)?;
    for &method in methods {
        let mine: Vec<&MethodRow> = rows.iter().filter(|r| r.method == method).collect();
        if mine.is_empty() {
            continue;
        }
        for r in &mine {
            w.write_record([
                method.as_str().to_string(),
                r.seed.to_string(),
                r.acc_source.to_string(),
                r.acc_target.to_string(),
                r.acc_expanded.to_string(),
                fmt_opt(r.acc_consistent),
                fmt_opt(r.acc_inconsistent),
                fmt_opt(r.ambiguity_s_to_t),
                fmt_opt(r.ambiguity_t_to_s),
            ])?;
        }
        let columns: [fn(&MethodRow) -> Option<f64>; 7] = [
            |r| Some(r.acc_source),
            |r| Some(r.acc_target),
            |r| Some(r.acc_expanded),
            |r| r.acc_consistent,
            |r| r.acc_inconsistent,
            |r| r.ambiguity_s_to_t,
            |r| r.ambiguity_t_to_s,
        ];
        let stats: Vec<(Option<f64>, Option<f64>)> = columns
            .iter()
            .map(|col| mean_std(&mine.iter().filter_map(|r| col(r)).collect::<Vec<f64>>()))
            .collect();
        let mut mean_row = vec![method.as_str().to_string(), "mean".to_string()];
        mean_row.extend(stats.iter().map(|s| fmt_opt(s.0)));
        w.write_record(&mean_row)?;
        if mine.len() > 1 {
            let mut std_row = vec![method.as_str().to_string(), "std".to_string()];
            std_row.extend(stats.iter().map(|s| fmt_opt(s.1)));
            w.write_record(&std_row)?;
        }
    }
    Ok(w.into_inner().context("csv buffer")?)
}

/// Runs every seed (in parallel), writes per-seed artifacts, the aggregate
/// CSV and `manifest.json` under the output directory.
pub fn cmd_pipeline(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunManifest> {
    config.validate()?;
    let start = Instant::now();
    let shared = Shared::prepare(config, opts, MANIFEST)?;
    let mut manifest = RunManifest::new("pipeline", config);
    manifest.inputs = shared.inputs.clone();

    let mut rec = Recorder::new(&shared.root, None);
    let cfg_json = serde_json::to_string_pretty(config).expect("config serializes");
    rec.write("config.json", "config", cfg_json.as_bytes())?;
    manifest.artifacts.append(&mut rec.artifacts);

    let records = for_each_seed(&config.seeds, opts.jobs, |seed| {
        SeedRun::execute(&shared, seed, run_seed)
    })?;
    let mut rows = Vec::new();
    for mut r in records {
        if let Some(mut seed_rows) = r.merge_into(&mut manifest) {
            rows.append(&mut seed_rows);
        }
    }
    rec.write(AGGREGATE, "aggregate", &aggregate_csv(&config.methods, &rows)?)?;
    manifest.artifacts.append(&mut rec.artifacts);
    manifest.table = Some(AGGREGATE.to_string());
    manifest.wall_ms = start.elapsed().as_millis() as u64;
    manifest.save(&shared.root.join(MANIFEST))?;
    Ok(manifest)
}
