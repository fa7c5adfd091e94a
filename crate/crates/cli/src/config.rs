//! Experiment configuration: one JSON document, overridden by command-line
//! flags (flag > config file > built-in default).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use coteach_core::{DomainShiftConfig, GammaSetting, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A model produced by the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Source,
    UdaMmd,
    Kdde,
    Multit,
    Kdct,
    Mict,
    Ct,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Source,
        Method::UdaMmd,
        Method::Kdde,
        Method::Multit,
        Method::Kdct,
        Method::Mict,
        Method::Ct,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Source => "source",
            Method::UdaMmd => "uda_mmd",
            Method::Kdde => "kdde",
            Method::Multit => "multit",
            Method::Kdct => "kdct",
            Method::Mict => "mict",
            Method::Ct => "ct",
        }
    }

    pub fn is_teacher(self) -> bool {
        matches!(self, Method::Source | Method::UdaMmd)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.as_str()).collect();
                format!("unknown method `{s}` (expected one of {})", names.join(", "))
            })
    }
}

/// Where the data comes from: generated per seed, or one fixed file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Generate(DomainShiftConfig),
    Path(PathBuf),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Generate(DomainShiftConfig::default())
    }
}

/// Pre-trained teacher checkpoints used instead of training them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherPaths {
    pub source: PathBuf,
    pub target: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub settings: Vec<GammaSetting>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            settings: GammaSetting::ablation_defaults(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub train: TrainConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub teachers: Option<TeacherPaths>,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::default(),
            train: TrainConfig::default(),
            methods: vec![Method::Source, Method::UdaMmd, Method::Kdde, Method::Ct],
            seeds: (0..10).collect(),
            output_dir: PathBuf::from("runs/default"),
            teachers: None,
            ablation: AblationConfig::default(),
        }
    }
}

/// Values given on the command line; `None` leaves the config untouched.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub methods: Option<Vec<Method>>,
    pub settings: Option<Vec<GammaSetting>>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Reads `path` if given, otherwise starts from the defaults, then
    /// applies the overrides.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.seeds = vec![seed];
            cfg.train.seed = seed;
            if let DatasetSource::Generate(d) = &mut cfg.dataset {
                d.seed = seed;
            }
        }
        if let Some(out) = &overrides.out {
            cfg.output_dir = out.clone();
        }
        if let Some(m) = &overrides.methods {
            cfg.methods = m.clone();
        }
        if let Some(s) = &overrides.settings {
            cfg.ablation.settings = s.clone();
        }
        cfg.methods.sort();
        cfg.methods.dedup();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetSource::Generate(d) = &self.dataset {
            d.validate()?;
        }
        self.train.validate()?;
        if self.methods.is_empty() {
            bail!("invalid configuration: methods: at least one method is required");
        }
        if self.seeds.is_empty() {
            bail!("invalid configuration: seeds: at least one seed is required");
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            bail!("invalid configuration: seeds: duplicate seed");
        }
        let needs_teachers = self.methods.iter().any(|m| !m.is_teacher());
        let has_teachers = self.teachers.is_some()
            || (self.methods.contains(&Method::Source) && self.methods.contains(&Method::UdaMmd));
        if needs_teachers && !has_teachers {
            bail!(
                "invalid configuration: methods: distillation needs `source` and `uda_mmd` \
                 or teacher checkpoint paths"
            );
        }
        for s in &self.ablation.settings {
            s.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Dataset generator config for `seed`, if the data is generated.
    pub fn dataset_for_seed(&self, seed: u64) -> Option<DomainShiftConfig> {
        match &self.dataset {
            DatasetSource::Generate(d) => Some(DomainShiftConfig {
                seed,
                ..d.clone()
            }),
            DatasetSource::Path(_) => None,
        }
    }

    pub fn train_for_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_config_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"seeds": [3, 4], "train": {"epochs": 7}, "output_dir": "from-config"}"#,
        )
        .unwrap();
        let cfg = ExperimentConfig::resolve(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.output_dir, PathBuf::from("from-config"));

        let flags = Overrides {
            seed: Some(9),
            out: Some("from-flag".into()),
            ..Overrides::default()
        };
        let cfg = ExperimentConfig::resolve(Some(&path), &flags).unwrap();
        assert_eq!(cfg.seeds, vec![9]);
        assert_eq!(cfg.output_dir, PathBuf::from("from-flag"));
        assert_eq!(cfg.dataset_for_seed(9).unwrap().seed, 9);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"seedz": [1]}"#).unwrap_err();
        assert!(err.to_string().contains("seedz"));
    }

    #[test]
    fn dataset_forms() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"dataset": {"path": "data.csv"}}"#).unwrap();
        assert_eq!(cfg.dataset, DatasetSource::Path("data.csv".into()));
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"dataset": {"generate": {"ambiguity_rate": 0.1}}}"#).unwrap();
        match cfg.dataset {
            DatasetSource::Generate(d) => assert_eq!(d.ambiguity_rate, 0.1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn teacher_requirement() {
        let cfg = ExperimentConfig {
            methods: vec![Method::Source, Method::Ct],
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("methods"));
        let cfg = ExperimentConfig {
            teachers: Some(TeacherPaths {
                source: "a".into(),
                target: "b".into(),
            }),
            ..cfg
        };
        cfg.validate().unwrap();
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("mmd".parse::<Method>().is_err());
    }

    #[test]
    fn invalid_rho_names_the_field() {
        let mut cfg = ExperimentConfig::default();
        if let DatasetSource::Generate(d) = &mut cfg.dataset {
            d.ambiguity_rate = 0.5;
        }
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("ambiguity_rate"), "{msg}");
    }
}
