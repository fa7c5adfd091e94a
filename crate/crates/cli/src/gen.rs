//! `gen`: writes one generated domain pair to disk.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use coteach_core::{generate_domain_pair, save_dataset};

use crate::config::{DatasetSource, ExperimentConfig};

pub const DATASET: &str = "dataset.csv";

/// Generates the configured dataset and saves it to `out`, or to
/// `<output_dir>/dataset.csv`. Returns the path written.
pub fn cmd_gen(config: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    let DatasetSource::Generate(d) = &config.dataset else {
        bail!("invalid configuration: dataset: `gen` needs a generator config, not a path");
    };
    d.validate()?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| config.output_dir.join(DATASET));
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let data = generate_domain_pair(d)?;
    save_dataset(&data, &path)?;
    Ok(path)
}
