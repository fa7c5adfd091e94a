//! The gamma ablation: kdCT students for a list of gamma settings, on the
//! same teachers the pipeline trains for each seed.

use std::time::Instant;

use anyhow::{Context, Result};
use coteach_core::{gamma_ablation, AblationRow, GammaSetting};

use crate::config::ExperimentConfig;
use crate::manifest::{Recorder, RunManifest};
use crate::run::{for_each_seed, require_pair, RunOptions, SeedRun, Shared};
use crate::svg;

pub const MANIFEST: &str = "ablation_manifest.json";
pub const TABLE: &str = "ablation.csv";
pub const PLOT: &str = "ablation.svg";
pub const HEADER: [&str; 5] = ["setting", "seed", "acc_source", "acc_target", "acc_expanded"];

fn run_seed(run: &mut SeedRun<'_>, settings: &[GammaSetting]) -> Result<Vec<AblationRow>> {
    let data = run.data()?;
    let (ns, nt) = run.teachers(&data, true, true)?;
    let teachers = require_pair(&ns, &nt)?;
    let cfg = run.train_config();
    let start = Instant::now();
    let rows = gamma_ablation(&teachers, &data.data, settings, &cfg, &[run.seed])
        .context("gamma ablation failed")?;
    run.stages.push(crate::manifest::StageRecord {
        seed: run.seed,
        stage: "ablation".into(),
        checkpoint: None,
        log: None,
        report: None,
        wall_ms: start.elapsed().as_millis() as u64,
        resumed: false,
    });
    Ok(rows.into_iter().filter(|r| r.seed.is_some()).collect())
}

/// Seed-averaged row per setting, in setting order.
pub fn setting_means(settings: &[GammaSetting], rows: &[AblationRow]) -> Vec<AblationRow> {
    settings
        .iter()
        .filter_map(|s| {
            let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.setting == *s).collect();
            if mine.is_empty() {
                return None;
            }
            let n = mine.len() as f64;
            let mean = |f: fn(&AblationRow) -> f64| mine.iter().map(|r| f(r)).sum::<f64>() / n;
            Some(AblationRow {
                setting: *s,
                seed: None,
                acc_source: mean(|r| r.acc_source),
                acc_target: mean(|r| r.acc_target),
                acc_expanded: mean(|r| r.acc_expanded),
            })
        })
        .collect()
}

/// Rows sorted by setting (in `settings` order), then seed (in `seeds`
/// order), each setting closed by its `mean` row.
pub fn ablation_csv(settings: &[GammaSetting], seeds: &[u64], rows: &[AblationRow]) -> Result<Vec<u8>> {
    let means = setting_means(settings, rows);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER)?;
    for s in settings {
        for seed in seeds {
            if let Some(r) = rows.iter().find(|r| r.setting == *s && r.seed == Some(*seed)) {
                w.write_record([
                    s.to_string(),
                    seed.to_string(),
                    r.acc_source.to_string(),
                    r.acc_target.to_string(),
                    r.acc_expanded.to_string(),
                ])?;
            }
        }
        if let Some(m) = means.iter().find(|m| m.setting == *s) {
            w.write_record([
                s.to_string(),
                "mean".to_string(),
                m.acc_source.to_string(),
                m.acc_target.to_string(),
                m.acc_expanded.to_string(),
            ])?;
        }
    }
    Ok(w.into_inner().context("csv buffer")?)
}

fn ablation_svg(settings: &[GammaSetting], rows: &[AblationRow]) -> String {
    let means = setting_means(settings, rows);
    let labels: Vec<String> = means.iter().map(|m| m.setting.to_string()).collect();
    let pct = |f: fn(&AblationRow) -> f64| means.iter().map(|m| 100.0 * f(m)).collect::<Vec<f64>>();
    svg::line_chart(
        "Accuracy by gamma setting (seed mean)",
        &labels,
        &[
            ("source", pct(|r| r.acc_source)),
            ("target", pct(|r| r.acc_target)),
            ("expanded", pct(|r| r.acc_expanded)),
        ],
    )
}

/// Trains (or reuses) the teachers per seed, runs the ablation over the
/// configured settings and writes `ablation.csv`, `ablation.svg` and
/// `ablation_manifest.json`.
pub fn cmd_ablate_gamma(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunManifest> {
    config.validate()?;
    let start = Instant::now();
    let settings = config.ablation.settings.clone();
    anyhow::ensure!(!settings.is_empty(), "invalid configuration: ablation.settings: empty");
    let shared = Shared::prepare(config, opts, MANIFEST)?;
    let mut manifest = RunManifest::new("ablate-gamma", config);
    manifest.inputs = shared.inputs.clone();

    let mut rec = Recorder::new(&shared.root, None);
    let cfg_json = serde_json::to_string_pretty(config).expect("config serializes");
    rec.write("ablation_config.json", "config", cfg_json.as_bytes())?;
    manifest.artifacts.append(&mut rec.artifacts);

    let records = for_each_seed(&config.seeds, opts.jobs, |seed| {
        SeedRun::execute(&shared, seed, |run| run_seed(run, &settings))
    })?;
    let mut rows = Vec::new();
    for mut r in records {
        if let Some(mut seed_rows) = r.merge_into(&mut manifest) {
            rows.append(&mut seed_rows);
        }
    }
    rec.write(TABLE, "ablation", &ablation_csv(&settings, &config.seeds, &rows)?)?;
    rec.write(PLOT, "plot", ablation_svg(&settings, &rows).as_bytes())?;
    manifest.artifacts.append(&mut rec.artifacts);
    manifest.table = Some(TABLE.to_string());
    manifest.wall_ms = start.elapsed().as_millis() as u64;
    manifest.save(&shared.root.join(MANIFEST))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(setting: GammaSetting, seed: u64, acc: f64) -> AblationRow {
        AblationRow {
            setting,
            seed: Some(seed),
            acc_source: acc,
            acc_target: acc,
            acc_expanded: acc,
        }
    }

    #[test]
    fn sorted_by_setting_then_seed() {
        let a = GammaSetting::Beta {
            alpha: 10.0,
            beta: 1.0,
        };
        let b = GammaSetting::Fixed { value: 1.0 };
        // deliberately shuffled input
        let rows = vec![row(b, 2, 0.5), row(a, 2, 0.25), row(b, 1, 1.0), row(a, 1, 0.75)];
        let text = String::from_utf8(ablation_csv(&[a, b], &[1, 2], &rows).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines,
            vec![
                "setting,seed,acc_source,acc_target,acc_expanded",
                "\"Beta(10,1)\",1,0.75,0.75,0.75",
                "\"Beta(10,1)\",2,0.25,0.25,0.25",
                "\"Beta(10,1)\",mean,0.5,0.5,0.5",
                "fixed 1,1,1,1,1",
                "fixed 1,2,0.5,0.5,0.5",
                "fixed 1,mean,0.75,0.75,0.75",
            ]
        );
    }

    #[test]
    fn default_settings_table() {
        let labels: Vec<String> = GammaSetting::ablation_defaults().iter().map(|s| s.to_string()).collect();
        assert_eq!(
            labels,
            [
                "Beta(10,1)",
                "Beta(5,1)",
                "Beta(1,1)",
                "Beta(1,5)",
                "Beta(1,10)",
                "fixed 0.5",
                "fixed 0.909",
                "fixed 1"
            ]
        );
    }
}
