//! Run manifests: every file a command writes, with its SHA-256 digest,
//! plus per-stage paths, timings and per-seed status.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const DIGEST_ALGORITHM: &str = "sha256";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the manifest's directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    pub kind: String,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seed: u64,
    pub stage: String,
    pub checkpoint: Option<String>,
    pub log: Option<String>,
    pub report: Option<String>,
    pub wall_ms: u64,
    pub resumed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedStatus {
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub digest_algorithm: String,
    pub config_digest: String,
    pub config: ExperimentConfig,
    /// Files read but not written by the run (dataset or teacher paths).
    pub inputs: Vec<Artifact>,
    pub artifacts: Vec<Artifact>,
    pub stages: Vec<StageRecord>,
    pub seeds: Vec<SeedStatus>,
    /// The run's main table (`aggregate.csv` or `ablation.csv`).
    pub table: Option<String>,
    pub wall_ms: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            digest_algorithm: DIGEST_ALGORITHM.to_string(),
            config_digest: config.digest(),
            config: config.clone(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
            stages: Vec::new(),
            seeds: Vec::new(),
            table: None,
            wall_ms: 0,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("invalid manifest {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(path, json.as_bytes())
    }

    /// Digest of every listed artifact, keyed by relative path.
    pub fn digests(&self) -> BTreeMap<&str, &str> {
        self.artifacts
            .iter()
            .map(|a| (a.path.as_str(), a.sha256.as_str()))
            .collect()
    }

    /// Checks that every artifact (and input) exists with its recorded
    /// digest. `root` is the directory holding the manifest.
    pub fn verify(&self, root: &Path) -> Result<()> {
        if self.digest_algorithm != DIGEST_ALGORITHM {
            bail!("unsupported digest algorithm `{}`", self.digest_algorithm);
        }
        let listed = self
            .artifacts
            .iter()
            .map(|a| (root.join(&a.path), a))
            .chain(self.inputs.iter().map(|a| (PathBuf::from(&a.path), a)));
        for (path, a) in listed {
            let bytes = fs::read(&path)
                .map_err(|e| anyhow!("missing artifact {}: {e}", path.display()))?;
            let got = sha256_hex(&bytes);
            if got != a.sha256 {
                bail!(
                    "digest mismatch for {}: manifest has {}, file has {}",
                    path.display(),
                    a.sha256,
                    got
                );
            }
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a temporary sibling and a rename, so a file is either
/// absent or complete.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_os_string();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Writes files below `root` and records them as artifacts.
#[derive(Debug)]
pub struct Recorder<'a> {
    root: &'a Path,
    seed: Option<u64>,
    pub artifacts: Vec<Artifact>,
}

impl<'a> Recorder<'a> {
    pub fn new(root: &'a Path, seed: Option<u64>) -> Self {
        Recorder {
            root,
            seed,
            artifacts: Vec::new(),
        }
    }

    pub fn root(&self) -> &Path {
        self.root
    }

    pub fn write(&mut self, rel: &str, kind: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.root.join(rel), bytes)?;
        self.push(rel, kind, bytes);
        Ok(())
    }

    /// Records a file that is already on disk.
    pub fn record(&mut self, rel: &str, kind: &str) -> Result<()> {
        let path = self.root.join(rel);
        let bytes = fs::read(&path).with_context(|| format!("cannot read {}", path.display()))?;
        self.push(rel, kind, &bytes);
        Ok(())
    }

    fn push(&mut self, rel: &str, kind: &str, bytes: &[u8]) {
        self.artifacts.retain(|a| a.path != rel);
        self.artifacts.push(Artifact {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
            kind: kind.to_string(),
            seed: self.seed,
        });
    }
}

/// An input file recorded by absolute or caller-relative path.
pub fn input_artifact(path: &Path, kind: &str) -> Result<Artifact> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(Artifact {
        path: path.to_string_lossy().into_owned(),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
        kind: kind.to_string(),
        seed: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verify_names_the_broken_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = Recorder::new(dir.path(), Some(1));
        rec.write("seed-1/a.txt", "report", b"alpha").unwrap();
        rec.write("b.txt", "report", b"beta").unwrap();
        let mut m = RunManifest::new("pipeline", &ExperimentConfig::default());
        m.artifacts = rec.artifacts;
        m.verify(dir.path()).unwrap();

        fs::write(dir.path().join("seed-1/a.txt"), b"alpha!").unwrap();
        let err = m.verify(dir.path()).unwrap_err().to_string();
        assert!(err.contains("digest mismatch") && err.contains("a.txt"), "{err}");

        fs::remove_file(dir.path().join("b.txt")).unwrap();
        fs::write(dir.path().join("seed-1/a.txt"), b"alpha").unwrap();
        let err = m.verify(dir.path()).unwrap_err().to_string();
        assert!(err.contains("missing artifact") && err.contains("b.txt"), "{err}");
    }

    #[test]
    fn rewriting_replaces_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = Recorder::new(dir.path(), None);
        rec.write("x", "log", b"1").unwrap();
        rec.write("x", "log", b"2").unwrap();
        assert_eq!(rec.artifacts.len(), 1);
        assert_eq!(rec.artifacts[0].sha256, sha256_hex(b"2"));
        assert!(!dir.path().join("x.tmp").exists());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = RunManifest::new("pipeline", &ExperimentConfig::default());
        m.save(&path).unwrap();
        assert_eq!(RunManifest::load(&path).unwrap(), m);
    }
}
