//! Machinery shared by the multi-seed commands: read-only inputs, the
//! per-seed workspace, checkpointed stages and `--resume`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use coteach_core::{
    generate_domain_pair, load_checkpoint, load_dataset, metadata_path, save_dataset, train_source,
    train_uda_mmd, Checkpoint, CheckpointMeta, DomainPairDataset, MlpClassifier, TeacherPair,
    TrainConfig, TrainedModel,
};
use serde::Serialize;

use crate::config::{DatasetSource, ExperimentConfig, Method};
use crate::manifest::{input_artifact, sha256_hex, Artifact, Recorder, RunManifest, SeedStatus, StageRecord};

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub resume: bool,
    /// Worker threads; `None` uses every available core.
    pub jobs: Option<usize>,
}

/// Inputs every seed reads but never writes.
#[derive(Debug)]
pub struct Shared {
    pub config: ExperimentConfig,
    pub root: PathBuf,
    pub resume: bool,
    /// Digests from the manifest of an earlier run in `root`.
    pub previous: BTreeMap<String, String>,
    pub data: Option<(Arc<DomainPairDataset>, String)>,
    pub teachers: Option<(TeacherPair, String, String)>,
    pub inputs: Vec<Artifact>,
}

impl Shared {
    pub fn prepare(config: &ExperimentConfig, opts: &RunOptions, manifest_name: &str) -> Result<Shared> {
        let root = config.output_dir.clone();
        fs::create_dir_all(&root).with_context(|| format!("cannot create {}", root.display()))?;
        let mut previous = BTreeMap::new();
        let old = root.join(manifest_name);
        if opts.resume && old.exists() {
            match RunManifest::load(&old) {
                Ok(m) => {
                    for a in m.artifacts {
                        previous.insert(a.path, a.sha256);
                    }
                }
                Err(e) => log::warn!("ignoring unreadable previous manifest: {e:#}"),
            }
        }
        let mut inputs = Vec::new();
        let data = match &config.dataset {
            DatasetSource::Path(p) => {
                let ds = load_dataset(p).with_context(|| format!("cannot load dataset {}", p.display()))?;
                let a = input_artifact(p, "dataset")?;
                let digest = a.sha256.clone();
                inputs.push(a);
                if metadata_path(p).exists() {
                    inputs.push(input_artifact(&metadata_path(p), "dataset-metadata")?);
                }
                Some((Arc::new(ds), digest))
            }
            DatasetSource::Generate(_) => None,
        };
        let teachers = match &config.teachers {
            Some(t) => {
                let load = |p: &Path| {
                    load_checkpoint(p)
                        .map(|(m, _)| m)
                        .with_context(|| format!("cannot load teacher {}", p.display()))
                };
                let (s, t_) = (load(&t.source)?, load(&t.target)?);
                inputs.push(input_artifact(&t.source, "teacher")?);
                inputs.push(input_artifact(&t.target, "teacher")?);
                let (ds, dt) = (s.digest(), t_.digest());
                Some((TeacherPair::new(s, t_), ds, dt))
            }
            None => None,
        };
        Ok(Shared {
            config: config.clone(),
            root,
            resume: opts.resume,
            previous,
            data,
            teachers,
            inputs,
        })
    }
}

/// Runs `f` for every seed on a pool of `jobs` threads. Results come back
/// in seed order regardless of scheduling.
pub fn for_each_seed<T, F>(seeds: &[u64], jobs: Option<usize>, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> T + Sync,
{
    use rayon::prelude::*;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().context("cannot start worker threads")?;
    Ok(pool.install(|| seeds.par_iter().map(|&s| f(s)).collect()))
}

/// Everything one seed wrote, whether or not it finished.
#[derive(Debug)]
pub struct SeedRecord<T> {
    pub status: SeedStatus,
    pub artifacts: Vec<Artifact>,
    pub stages: Vec<StageRecord>,
    pub output: Option<T>,
}

impl<T> SeedRecord<T> {
    pub fn merge_into(&mut self, manifest: &mut RunManifest) -> Option<T> {
        manifest.seeds.push(self.status.clone());
        manifest.artifacts.append(&mut self.artifacts);
        manifest.stages.append(&mut self.stages);
        self.output.take()
    }
}

/// Per-seed workspace below `<root>/seed-<seed>/`.
pub struct SeedRun<'a> {
    pub shared: &'a Shared,
    pub seed: u64,
    pub rec: Recorder<'a>,
    pub stages: Vec<StageRecord>,
}

/// The seed's data and the digest that identifies it.
pub struct SeedData {
    pub data: Arc<DomainPairDataset>,
    pub digest: String,
}

#[derive(Serialize)]
struct StageKey<'a> {
    method: &'a str,
    train: &'a TrainConfig,
    data: &'a str,
    teachers: Option<(&'a str, &'a str)>,
}

impl<'a> SeedRun<'a> {
    /// Runs `body` in a fresh workspace and packages what it produced.
    pub fn execute<T, F>(shared: &'a Shared, seed: u64, body: F) -> SeedRecord<T>
    where
        F: FnOnce(&mut SeedRun<'a>) -> Result<T>,
    {
        let start = Instant::now();
        let mut run = SeedRun {
            shared,
            seed,
            rec: Recorder::new(&shared.root, Some(seed)),
            stages: Vec::new(),
        };
        let result = body(&mut run);
        let wall_ms = start.elapsed().as_millis() as u64;
        let (ok, error, output) = match result {
            Ok(v) => (true, None, Some(v)),
            Err(e) => {
                log::error!("seed {seed} failed: {e:#}");
                (false, Some(format!("{e:#}")), None)
            }
        };
        SeedRecord {
            status: SeedStatus {
                seed,
                ok,
                error,
                wall_ms,
            },
            artifacts: run.rec.artifacts,
            stages: run.stages,
            output,
        }
    }

    pub fn rel(&self, name: &str) -> String {
        format!("seed-{}/{name}", self.seed)
    }

    pub fn train_config(&self) -> TrainConfig {
        self.shared.config.train_for_seed(self.seed)
    }

    /// Generates (and writes) this seed's dataset, or hands out the shared one.
    pub fn data(&mut self) -> Result<SeedData> {
        if let Some((data, digest)) = &self.shared.data {
            return Ok(SeedData {
                data: Arc::clone(data),
                digest: digest.clone(),
            });
        }
        let cfg = self
            .shared
            .config
            .dataset_for_seed(self.seed)
            .expect("generated dataset");
        let data = generate_domain_pair(&cfg)?;
        let rel = self.rel("dataset.csv");
        let path = self.shared.root.join(&rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        }
        save_dataset(&data, &path)?;
        self.rec.record(&rel, "dataset")?;
        self.rec.record(&self.rel("dataset.csv.meta.json"), "dataset-metadata")?;
        let digest = sha256_hex(&fs::read(&path)?);
        Ok(SeedData {
            data: Arc::new(data),
            digest,
        })
    }

    /// Trains the source and/or target teacher (or reuses given ones).
    pub fn teachers(
        &mut self,
        data: &SeedData,
        want_source: bool,
        want_target: bool,
    ) -> Result<(Option<MlpClassifier>, Option<MlpClassifier>)> {
        if let Some((pair, _, _)) = &self.shared.teachers {
            return Ok((Some(pair.source.clone()), Some(pair.target.clone())));
        }
        let cfg = self.train_config();
        let source = if want_source {
            Some(self.stage(Method::Source, &cfg, data, None, || train_source(&data.data, &cfg))?)
        } else {
            None
        };
        let target = if want_target {
            Some(self.stage(Method::UdaMmd, &cfg, data, None, || train_uda_mmd(&data.data, &cfg))?)
        } else {
            None
        };
        Ok((source, target))
    }

    /// Runs one training stage, writing `<method>.ckpt.json` and
    /// `<method>.log.csv`, or reuses them under `--resume` when their
    /// digests and stage identity check out.
    pub fn stage<F>(
        &mut self,
        method: Method,
        cfg: &TrainConfig,
        data: &SeedData,
        teachers: Option<&TeacherPair>,
        train: F,
    ) -> Result<MlpClassifier>
    where
        F: FnOnce() -> coteach_core::Result<TrainedModel>,
    {
        let start = Instant::now();
        let digests = teachers.map(|t| (t.source.digest(), t.target.digest()));
        let key = StageKey {
            method: method.as_str(),
            train: cfg,
            data: &data.digest,
            teachers: digests.as_ref().map(|(a, b)| (a.as_str(), b.as_str())),
        };
        let key = sha256_hex(&serde_json::to_vec(&key).expect("stage key serializes"));
        let ckpt_rel = self.rel(&format!("{method}.ckpt.json"));
        let log_rel = self.rel(&format!("{method}.log.csv"));

        let (model, resumed) = match self.try_resume(method, &key, &ckpt_rel, &log_rel) {
            Some(model) => {
                self.rec.record(&log_rel, "log")?;
                self.rec.record(&ckpt_rel, "checkpoint")?;
                (model, true)
            }
            None => {
                log::info!("seed {}: training {method}", self.seed);
                let trained = train().with_context(|| format!("stage {method} failed"))?;
                self.rec.write(&log_rel, "log", trained.log.to_csv().as_bytes())?;
                let meta = CheckpointMeta {
                    seed: self.seed,
                    trainer: method.as_str().to_string(),
                    epoch: cfg.epochs,
                    config_digest: key,
                };
                let json = serde_json::to_string(&Checkpoint::new(&trained.model, meta))
                    .expect("checkpoint serializes");
                self.rec.write(&ckpt_rel, "checkpoint", json.as_bytes())?;
                (trained.model, false)
            }
        };
        self.stages.push(StageRecord {
            seed: self.seed,
            stage: method.as_str().to_string(),
            checkpoint: Some(ckpt_rel),
            log: Some(log_rel),
            report: None,
            wall_ms: start.elapsed().as_millis() as u64,
            resumed,
        });
        Ok(model)
    }

    fn try_resume(&self, method: Method, key: &str, ckpt_rel: &str, log_rel: &str) -> Option<MlpClassifier> {
        if !self.shared.resume {
            return None;
        }
        let root = &self.shared.root;
        for rel in [ckpt_rel, log_rel] {
            let bytes = fs::read(root.join(rel)).ok()?;
            if let Some(want) = self.shared.previous.get(rel) {
                if sha256_hex(&bytes) != *want {
                    log::warn!("{rel} does not match the previous manifest; retraining");
                    return None;
                }
            }
        }
        match load_checkpoint(&root.join(ckpt_rel)) {
            Ok((model, meta))
                if meta.config_digest == key
                    && meta.trainer == method.as_str()
                    && meta.seed == self.seed =>
            {
                log::info!("seed {}: reusing {ckpt_rel}", self.seed);
                Some(model)
            }
            Ok(_) => {
                log::warn!("{ckpt_rel} was produced by a different configuration; retraining");
                None
            }
            Err(e) => {
                log::warn!("{ckpt_rel} is unusable ({e}); retraining");
                None
            }
        }
    }
}

/// `TeacherPair` from the two optional teachers, if both exist.
pub fn pair(source: &Option<MlpClassifier>, target: &Option<MlpClassifier>) -> Option<TeacherPair> {
    match (source, target) {
        (Some(s), Some(t)) => Some(TeacherPair::new(s.clone(), t.clone())),
        _ => None,
    }
}

pub fn require_pair(source: &Option<MlpClassifier>, target: &Option<MlpClassifier>) -> Result<TeacherPair> {
    pair(source, target).ok_or_else(|| anyhow!("distillation needs both teachers"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_order_is_kept() {
        let out = for_each_seed(&[5, 1, 3], Some(3), |s| s * 10).unwrap();
        assert_eq!(out, vec![50, 10, 30]);
    }

    #[test]
    fn one_failing_seed_leaves_the_others() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            output_dir: dir.path().to_path_buf(),
            ..ExperimentConfig::default()
        };
        let shared = Shared::prepare(&cfg, &RunOptions::default(), "manifest.json").unwrap();
        let records = for_each_seed(&[1, 2, 3], Some(2), |seed| {
            SeedRun::execute(&shared, seed, |run| {
                run.rec.write(&run.rel("partial.txt"), "report", b"x")?;
                if seed == 2 {
                    anyhow::bail!("injected failure");
                }
                Ok(seed)
            })
        })
        .unwrap();
        let ok: Vec<bool> = records.iter().map(|r| r.status.ok).collect();
        assert_eq!(ok, vec![true, false, true]);
        assert!(records[1].status.error.as_deref().unwrap().contains("injected"));
        assert_eq!(records[1].artifacts.len(), 1);
        assert_eq!(records[2].output, Some(3));
    }
}
