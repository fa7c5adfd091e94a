//! Synthetic source/target domain pairs.
//!
//! Source samples come from `K` isotropic Gaussian clusters whose means sit
//! on a circle in the first two coordinates. The target law uses the same
//! clusters rotated by `rotation_angle` and shifted by `translation`. With
//! probability `ambiguity_rate` a sample is drawn from the *other* domain's
//! law while keeping its host-domain tag, which plants a minority of
//! cross-domain-ambiguous samples in every subset. Because the generative
//! law is known, [`bayes_oracle_accuracy`] gives the exact accuracy ceiling.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{sample_uniform, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn other(self) -> Domain {
        match self {
            Domain::Source => Domain::Target,
            Domain::Target => Domain::Source,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            _ => Err(format!("unknown domain `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}`")),
        }
    }
}

/// One feature vector with its tags. Target-domain training samples never
/// carry a label; test samples always do.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    label: Option<usize>,
    pub domain: Domain,
    pub split: Split,
}

impl Sample {
    pub fn new(
        features: Vec<f64>,
        label: Option<usize>,
        domain: Domain,
        split: Split,
    ) -> std::result::Result<Self, String> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err("non-finite feature".into());
        }
        match (domain, split, label) {
            (Domain::Target, Split::Train, Some(_)) => {
                Err("target training samples must be unlabeled".into())
            }
            (_, Split::Test, None) => Err("test samples must be labeled".into()),
            (Domain::Source, Split::Train, None) => {
                Err("source training samples must be labeled".into())
            }
            _ => Ok(Sample {
                features,
                label,
                domain,
                split,
            }),
        }
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }
}

/// Generator knobs. `rotation_angle` is in radians; an empty `translation`
/// means no shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainShiftConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub cluster_separation: f64,
    pub rotation_angle: f64,
    pub translation: Vec<f64>,
    pub noise_sigma: f64,
    pub ambiguity_rate: f64,
    pub n_source: usize,
    pub n_target: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for DomainShiftConfig {
    /// The default benchmark: four classes in the plane, a 50 degree
    /// rotation, separation/noise of 4 and a 5% ambiguous minority.
    fn default() -> Self {
        DomainShiftConfig {
            num_classes: 4,
            dim: 2,
            cluster_separation: 4.0,
            rotation_angle: 50f64.to_radians(),
            translation: Vec::new(),
            noise_sigma: 1.0,
            ambiguity_rate: 0.05,
            n_source: 2000,
            n_target: 2000,
            n_test: 1000,
            seed: 0,
        }
    }
}

impl DomainShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        if self.dim < 2 {
            return Err(Error::config("dim", "need at least 2 dimensions"));
        }
        if !(self.cluster_separation.is_finite() && self.cluster_separation > 0.0) {
            return Err(Error::config("cluster_separation", "must be positive"));
        }
        if !self.rotation_angle.is_finite() {
            return Err(Error::config("rotation_angle", "must be finite"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma > 0.0) {
            return Err(Error::config("noise_sigma", "must be positive"));
        }
        if !(0.0..0.5).contains(&self.ambiguity_rate) {
            return Err(Error::config(
                "ambiguity_rate",
                format!("must lie in [0, 0.5), got {}", self.ambiguity_rate),
            ));
        }
        if !self.translation.is_empty() && self.translation.len() != self.dim {
            return Err(Error::config(
                "translation",
                format!("has {} entries for dim {}", self.translation.len(), self.dim),
            ));
        }
        if self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::config("translation", "must be finite"));
        }
        for (field, n) in [
            ("n_source", self.n_source),
            ("n_target", self.n_target),
            ("n_test", self.n_test),
        ] {
            if 2 * self.num_classes > n {
                return Err(Error::config(
                    field,
                    format!("{n} samples cannot hold {} classes", self.num_classes),
                ));
            }
        }
        Ok(())
    }

    /// Cluster mean of `class` under `domain`'s generative law.
    pub fn class_mean(&self, domain: Domain, class: usize) -> Vec<f64> {
        let k = self.num_classes as f64;
        let angle = 2.0 * std::f64::consts::PI * class as f64 / k;
        let mut mu = vec![0.0; self.dim];
        mu[0] = self.cluster_separation * angle.cos();
        mu[1] = self.cluster_separation * angle.sin();
        if domain == Domain::Target {
            let (s, c) = self.rotation_angle.sin_cos();
            let (x, y) = (mu[0], mu[1]);
            mu[0] = c * x - s * y;
            mu[1] = s * x + c * y;
            for (m, t) in mu.iter_mut().zip(&self.translation) {
                *m += t;
            }
        }
        mu
    }
}

/// Labeled source train set, unlabeled target train set, and labeled test
/// sets for both domains.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainPairDataset {
    pub dim: usize,
    pub num_classes: usize,
    pub source_train: Vec<Sample>,
    pub target_train: Vec<Sample>,
    pub source_test: Vec<Sample>,
    pub target_test: Vec<Sample>,
    pub generator_metadata: Option<DomainShiftConfig>,
}

impl DomainPairDataset {
    pub fn test_set(&self, domain: Domain) -> &[Sample] {
        match domain {
            Domain::Source => &self.source_test,
            Domain::Target => &self.target_test,
        }
    }

    pub fn train_set(&self, domain: Domain) -> &[Sample] {
        match domain {
            Domain::Source => &self.source_train,
            Domain::Target => &self.target_train,
        }
    }

    /// Source test samples followed by target test samples.
    pub fn expanded_test(&self) -> Vec<Sample> {
        self.source_test
            .iter()
            .chain(&self.target_test)
            .cloned()
            .collect()
    }

    fn subsets(&self) -> [&[Sample]; 4] {
        [
            &self.source_train,
            &self.target_train,
            &self.source_test,
            &self.target_test,
        ]
    }
}

/// Per-subset ground truth kept by the generator: which law each sample was
/// drawn from and its class, in dataset order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SubsetTrace {
    pub laws: Vec<Domain>,
    pub labels: Vec<usize>,
}

impl SubsetTrace {
    pub fn cross_domain_count(&self, host: Domain) -> usize {
        self.laws.iter().filter(|l| **l != host).count()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenerationTrace {
    pub source_train: SubsetTrace,
    pub target_train: SubsetTrace,
    pub source_test: SubsetTrace,
    pub target_test: SubsetTrace,
}

/// Draws a domain pair. A pure function of `config`, seed included.
pub fn generate_domain_pair(config: &DomainShiftConfig) -> Result<DomainPairDataset> {
    generate_domain_pair_traced(config).map(|(d, _)| d)
}

/// Like [`generate_domain_pair`] but also returns the generative ground truth.
pub fn generate_domain_pair_traced(
    config: &DomainShiftConfig,
) -> Result<(DomainPairDataset, GenerationTrace)> {
    config.validate()?;
    let root = SeededRng::new(config.seed);
    let mut trace = GenerationTrace::default();
    let (source_train, t) = draw_subset(config, &root, Domain::Source, Split::Train, config.n_source);
    trace.source_train = t;
    let (target_train, t) = draw_subset(config, &root, Domain::Target, Split::Train, config.n_target);
    trace.target_train = t;
    let (source_test, t) = draw_subset(config, &root, Domain::Source, Split::Test, config.n_test);
    trace.source_test = t;
    let (target_test, t) = draw_subset(config, &root, Domain::Target, Split::Test, config.n_test);
    trace.target_test = t;
    Ok((
        DomainPairDataset {
            dim: config.dim,
            num_classes: config.num_classes,
            source_train,
            target_train,
            source_test,
            target_test,
            generator_metadata: Some(config.clone()),
        },
        trace,
    ))
}

fn draw_subset(
    config: &DomainShiftConfig,
    root: &SeededRng,
    domain: Domain,
    split: Split,
    n: usize,
) -> (Vec<Sample>, SubsetTrace) {
    let mut rng = root.split(&format!("{}-{}", domain.as_str(), split.as_str()));
    let means: Vec<[Vec<f64>; 2]> = (0..config.num_classes)
        .map(|c| {
            [
                config.class_mean(domain, c),
                config.class_mean(domain.other(), c),
            ]
        })
        .collect();
    let mut drawn: Vec<(Vec<f64>, usize, Domain)> = (0..n)
        .map(|i| {
            let class = i % config.num_classes;
            let law = if sample_uniform(&mut rng) < config.ambiguity_rate {
                domain.other()
            } else {
                domain
            };
            let mu = &means[class][usize::from(law != domain)];
            let x = mu
                .iter()
                .map(|m| m + config.noise_sigma * rng.normal())
                .collect();
            (x, class, law)
        })
        .collect();
    rng.shuffle(&mut drawn);

    let mut trace = SubsetTrace::default();
    let samples = drawn
        .into_iter()
        .map(|(x, class, law)| {
            trace.laws.push(law);
            trace.labels.push(class);
            let label = (domain, split) != (Domain::Target, Split::Train);
            Sample {
                features: x,
                label: label.then_some(class),
                domain,
                split,
            }
        })
        .collect();
    (samples, trace)
}

/// Accuracy of the exact generative posterior on each test set. Each class
/// likelihood is the host-law Gaussian mixed with the other-domain Gaussian
/// at weight `ambiguity_rate`; classes are equiprobable.
pub fn bayes_oracle_accuracy(dataset: &DomainPairDataset) -> Result<(f64, f64)> {
    let config = dataset.generator_metadata.as_ref().ok_or_else(|| {
        Error::InvalidArgument("dataset carries no generator metadata".into())
    })?;
    let acc = |samples: &[Sample], domain: Domain| -> f64 {
        let means: Vec<[Vec<f64>; 2]> = (0..config.num_classes)
            .map(|c| {
                [
                    config.class_mean(domain, c),
                    config.class_mean(domain.other(), c),
                ]
            })
            .collect();
        let rho = config.ambiguity_rate;
        let inv2s2 = 1.0 / (2.0 * config.noise_sigma * config.noise_sigma);
        let correct = samples
            .iter()
            .filter(|s| {
                let mut best = (f64::NEG_INFINITY, 0usize);
                for (c, [host, other]) in means.iter().enumerate() {
                    let a = (1.0 - rho).ln() - sq_dist(&s.features, host) * inv2s2;
                    let score = if rho > 0.0 {
                        let b = rho.ln() - sq_dist(&s.features, other) * inv2s2;
                        let m = a.max(b);
                        m + ((a - m).exp() + (b - m).exp()).ln()
                    } else {
                        a
                    };
                    if score > best.0 {
                        best = (score, c);
                    }
                }
                Some(best.1) == s.label
            })
            .count();
        correct as f64 / samples.len() as f64
    };
    Ok((
        acc(&dataset.source_test, Domain::Source),
        acc(&dataset.target_test, Domain::Target),
    ))
}

fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Sidecar file holding the generator config next to a dataset file.
pub fn metadata_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

/// Writes the dataset as text: a `d=<dim> K=<classes>` header, then one
/// `f1,...,fd,label,domain,split` record per line with an empty label for
/// unlabeled records. Generator metadata, when present, goes to the
/// [`metadata_path`] sidecar.
pub fn save_dataset(dataset: &DomainPairDataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "d={} K={}", dataset.dim, dataset.num_classes).expect("vec write");
    for subset in dataset.subsets() {
        for s in subset {
            for v in &s.features {
                write!(out, "{v},").expect("vec write");
            }
            if let Some(l) = s.label {
                write!(out, "{l}").expect("vec write");
            }
            writeln!(out, ",{},{}", s.domain.as_str(), s.split.as_str()).expect("vec write");
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    let meta = metadata_path(path);
    match &dataset.generator_metadata {
        Some(cfg) => {
            let json = serde_json::to_string_pretty(cfg).expect("config serializes");
            fs::write(&meta, json).map_err(|e| Error::io(&meta, e))?;
        }
        None => {
            if meta.exists() {
                fs::remove_file(&meta).map_err(|e| Error::io(&meta, e))?;
            }
        }
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<DomainPairDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let perr = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| perr(1, "missing header".into()))?;
    let (dim, num_classes) = parse_header(header).map_err(|r| perr(1, r))?;

    let mut ds = DomainPairDataset {
        dim,
        num_classes,
        source_train: Vec::new(),
        target_train: Vec::new(),
        source_test: Vec::new(),
        target_test: Vec::new(),
        generator_metadata: None,
    };
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let fail = |reason: String| perr(lineno, format!("record {i}: {reason}"));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 3 {
            return Err(fail(format!(
                "expected {} fields, found {} (truncated or malformed record)",
                dim + 3,
                fields.len()
            )));
        }
        let features = fields[..dim]
            .iter()
            .enumerate()
            .map(|(k, f)| {
                f.parse::<f64>()
                    .map_err(|e| fail(format!("feature {k} `{f}`: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let label = match fields[dim] {
            "" => None,
            l => {
                let v: usize = l.parse().map_err(|e| fail(format!("label `{l}`: {e}")))?;
                if v >= num_classes {
                    return Err(fail(format!("label {v} out of range for K={num_classes}")));
                }
                Some(v)
            }
        };
        let domain: Domain = fields[dim + 1].parse().map_err(fail)?;
        let split: Split = fields[dim + 2].parse().map_err(fail)?;
        let sample = Sample::new(features, label, domain, split).map_err(fail)?;
        match (domain, split) {
            (Domain::Source, Split::Train) => ds.source_train.push(sample),
            (Domain::Target, Split::Train) => ds.target_train.push(sample),
            (Domain::Source, Split::Test) => ds.source_test.push(sample),
            (Domain::Target, Split::Test) => ds.target_test.push(sample),
        }
    }

    let meta = metadata_path(path);
    if meta.exists() {
        let json = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        let cfg: DomainShiftConfig = serde_json::from_str(&json).map_err(|e| Error::Parse {
            path: meta.clone(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        let expected = [cfg.n_source, cfg.n_target, cfg.n_test, cfg.n_test];
        let found = ds.subsets().map(|s| s.len());
        if expected != found || cfg.dim != dim || cfg.num_classes != num_classes {
            return Err(perr(
                text.lines().count(),
                format!(
                    "record counts {found:?} do not match the generator metadata {expected:?} (truncated file?)"
                ),
            ));
        }
        ds.generator_metadata = Some(cfg);
    }
    Ok(ds)
}

fn parse_header(line: &str) -> std::result::Result<(usize, usize), String> {
    let mut dim = None;
    let mut k = None;
    for tok in line.split_whitespace() {
        match tok.split_once('=') {
            Some(("d", v)) => dim = v.parse::<usize>().ok(),
            Some(("K", v)) => k = v.parse::<usize>().ok(),
            _ => return Err(format!("unexpected header token `{tok}`")),
        }
    }
    match (dim, k) {
        (Some(d), Some(k)) if d > 0 && k >= 2 => Ok((d, k)),
        _ => Err(format!("header must read `d=<dim> K=<classes>`, got `{line}`")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> DomainShiftConfig {
        DomainShiftConfig {
            n_source: 203,
            n_target: 150,
            n_test: 101,
            seed,
            ..DomainShiftConfig::default()
        }
    }

    fn counts(samples: &[Sample], k: usize) -> Vec<usize> {
        let mut c = vec![0; k];
        for s in samples {
            c[s.label().unwrap()] += 1;
        }
        c
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_domain_pair(&small(4)).unwrap();
        let b = generate_domain_pair(&small(4)).unwrap();
        let c = generate_domain_pair(&small(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn subsets_have_the_right_tags_and_balance() {
        let (ds, trace) = generate_domain_pair_traced(&small(1)).unwrap();
        assert_eq!(ds.source_train.len(), 203);
        assert_eq!(ds.target_train.len(), 150);
        assert!(ds.target_train.iter().all(|s| s.label().is_none()));
        for subset in [&ds.source_train, &ds.source_test, &ds.target_test] {
            let c = counts(subset, 4);
            let (lo, hi) = (c.iter().min().unwrap(), c.iter().max().unwrap());
            assert!(hi - lo <= 1, "{c:?}");
        }
        let mut tc = vec![0; 4];
        for l in &trace.target_train.labels {
            tc[*l] += 1;
        }
        assert!(tc.iter().max().unwrap() - tc.iter().min().unwrap() <= 1);
    }

    #[test]
    fn ambiguous_minority_is_planted() {
        let cfg = DomainShiftConfig {
            ambiguity_rate: 0.2,
            n_test: 1000,
            ..small(2)
        };
        let (_, trace) = generate_domain_pair_traced(&cfg).unwrap();
        let n = 1000.0;
        let sd = (n * 0.2 * 0.8f64).sqrt();
        for (t, host) in [(&trace.source_test, Domain::Source), (&trace.target_test, Domain::Target)] {
            let k = t.cross_domain_count(host) as f64;
            assert!(k >= (0.2 * n).floor() - 3.0 * sd, "{k}");
        }
    }

    #[test]
    fn rejects_invalid_configs() {
        let bad = DomainShiftConfig {
            ambiguity_rate: 0.5,
            ..small(0)
        };
        match generate_domain_pair(&bad) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "ambiguity_rate"),
            other => panic!("{other:?}"),
        }
        let bad = DomainShiftConfig {
            num_classes: 60,
            ..small(0)
        };
        assert!(generate_domain_pair(&bad).is_err());
        let bad = DomainShiftConfig {
            translation: vec![1.0],
            ..small(0)
        };
        assert!(generate_domain_pair(&bad).is_err());
    }

    #[test]
    fn oracle_degenerate_clusters() {
        let cfg = DomainShiftConfig {
            noise_sigma: 1e-9,
            ambiguity_rate: 0.0,
            ..small(3)
        };
        let ds = generate_domain_pair(&cfg).unwrap();
        assert_eq!(bayes_oracle_accuracy(&ds).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn oracle_needs_metadata() {
        let mut ds = generate_domain_pair(&small(3)).unwrap();
        ds.generator_metadata = None;
        assert!(bayes_oracle_accuracy(&ds).is_err());
    }

    #[test]
    fn sample_contract() {
        assert!(Sample::new(vec![0.0], Some(1), Domain::Target, Split::Train).is_err());
        assert!(Sample::new(vec![0.0], None, Domain::Source, Split::Test).is_err());
        assert!(Sample::new(vec![f64::NAN], Some(0), Domain::Source, Split::Test).is_err());
        assert!(Sample::new(vec![0.0], None, Domain::Target, Split::Train).is_ok());
    }

    #[test]
    fn header_parsing() {
        assert_eq!(parse_header("d=3 K=5").unwrap(), (3, 5));
        assert!(parse_header("d=3").is_err());
        assert!(parse_header("d=3 K=5 x=1").is_err());
    }
}
