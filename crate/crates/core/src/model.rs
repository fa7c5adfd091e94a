//! Feed-forward ReLU classifiers and their checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::synth::Sample;
use crate::tensor::{affine_forward, log_softmax_rows, relu_forward, softmax_rows, Tape, Tensor, Var};

/// `d -> hidden... -> K` perceptron with ReLU on every hidden layer.
///
/// Parameters are stored as `[W0, b0, W1, b1, ...]` with `Wl` shaped
/// `[fan_in, fan_out]`. The penultimate activations are exposed as
/// features.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpClassifier {
    layer_sizes: Vec<usize>,
    params: Vec<Tensor>,
}

/// Parameter handles of a model recorded on one tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    vars: Vec<Var>,
}

impl BoundMlp {
    /// Wraps parameter handles laid out as `[W0, b0, W1, b1, ...]`.
    pub fn from_vars(vars: &[Var]) -> Result<BoundMlp> {
        if vars.len() < 4 || vars.len() % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "expected an even number (>= 4) of parameter handles, got {}",
                vars.len()
            )));
        }
        Ok(BoundMlp {
            vars: vars.to_vec(),
        })
    }

    /// Returns `(logits, features)`.
    pub fn forward(&self, tape: &Tape, x: Var) -> Result<(Var, Var)> {
        let layers = self.vars.len() / 2;
        let mut h = x;
        let mut features = x;
        for l in 0..layers {
            let z = tape.affine(h, self.vars[2 * l], self.vars[2 * l + 1])?;
            if l + 1 == layers {
                return Ok((z, features));
            }
            h = tape.relu(z)?;
            features = h;
        }
        unreachable!("a model has at least two layers")
    }
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need input, at least one hidden layer and output, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.iter().any(|&s| s == 0) {
        return Err(Error::InvalidArgument(format!(
            "layer widths must be positive, got {layer_sizes:?}"
        )));
    }
    if *layer_sizes.last().expect("non-empty") < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    Ok(())
}

impl MlpClassifier {
    /// He-style init: weights `N(0, 2 / fan_in)`, biases zero.
    pub fn init(layer_sizes: &[usize], rng: &mut SeededRng) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut params = Vec::with_capacity(2 * (layer_sizes.len() - 1));
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| std * rng.normal()).collect();
            params.push(Tensor::param(vec![fan_in, fan_out], w)?);
            params.push(Tensor::param(vec![fan_out], vec![0.0; fan_out])?);
        }
        Ok(MlpClassifier {
            layer_sizes: layer_sizes.to_vec(),
            params,
        })
    }

    /// Builds a model from flattened parameter arrays in `[W0, b0, ...]` order.
    pub fn from_parts(layer_sizes: &[usize], arrays: Vec<Vec<f64>>) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        if arrays.len() != 2 * (layer_sizes.len() - 1) {
            return Err(Error::InvalidArgument(format!(
                "{} parameter arrays for {} layers",
                arrays.len(),
                layer_sizes.len() - 1
            )));
        }
        let mut params = Vec::with_capacity(arrays.len());
        let mut arrays = arrays.into_iter();
        for pair in layer_sizes.windows(2) {
            let w = arrays.next().expect("length checked");
            let b = arrays.next().expect("length checked");
            if w.iter().chain(&b).any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("non-finite parameter".into()));
            }
            params.push(Tensor::param(vec![pair[0], pair[1]], w)?);
            params.push(Tensor::param(vec![pair[1]], b)?);
        }
        Ok(MlpClassifier {
            layer_sizes: layer_sizes.to_vec(),
            params,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    pub fn feature_dim(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 2]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Records the parameters as trainable leaves.
    pub fn bind(&mut self, tape: &Tape) -> BoundMlp {
        BoundMlp {
            vars: self.params.iter_mut().map(|p| tape.watch(p)).collect(),
        }
    }

    /// Records the parameters as constants; nothing flows back to `self`.
    pub fn bind_frozen(&self, tape: &Tape) -> BoundMlp {
        BoundMlp {
            vars: self.params.iter().map(|p| tape.constant(p)).collect(),
        }
    }

    /// Tape-free forward pass over `rows` stacked inputs. Bit-identical to
    /// the tape forward. Returns `(logits, features)`.
    pub fn infer(&self, x: &[f64], rows: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.input_dim();
        if x.len() != rows * d {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("{} values for {rows} rows of width {d}", x.len()),
            });
        }
        let layers = self.layer_sizes.len() - 1;
        let mut h = x.to_vec();
        let mut features = Vec::new();
        for l in 0..layers {
            let (inp, out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let z = affine_forward(
                &h,
                rows,
                self.params[2 * l].values(),
                inp,
                out,
                self.params[2 * l + 1].values(),
            );
            if l + 1 == layers {
                return Ok((z, features));
            }
            h = relu_forward(&z);
            features.clone_from(&h);
        }
        unreachable!("validated layer sizes")
    }

    pub fn logits(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        self.infer(x, rows).map(|(l, _)| l)
    }

    /// Softmax of `logits / temperature`, row-major `rows x K`.
    pub fn probs(&self, x: &[f64], rows: usize, temperature: f64) -> Result<Vec<f64>> {
        softmax_rows(&self.logits(x, rows)?, rows, self.num_classes(), temperature)
    }

    pub fn log_probs(&self, x: &[f64], rows: usize, temperature: f64) -> Result<Vec<f64>> {
        log_softmax_rows(&self.logits(x, rows)?, rows, self.num_classes(), temperature)
    }

    /// Argmax class per row; ties go to the smaller class id.
    pub fn predict_rows(&self, x: &[f64], rows: usize) -> Result<Vec<usize>> {
        let logits = self.logits(x, rows)?;
        Ok(logits.chunks_exact(self.num_classes()).map(argmax).collect())
    }

    /// SHA-256 over the layer sizes and the exact parameter bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.layer_sizes {
            h.update((*s as u64).to_le_bytes());
        }
        for p in &self.params {
            for v in p.values() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = c;
        }
    }
    best
}

/// Stacks sample features into one row-major matrix.
pub fn stack_features(samples: &[Sample]) -> (Vec<f64>, usize) {
    let mut x = Vec::with_capacity(samples.iter().map(|s| s.features.len()).sum());
    for s in samples {
        x.extend_from_slice(&s.features);
    }
    (x, samples.len())
}

/// Predicted class for every sample.
pub fn predict(model: &MlpClassifier, samples: &[Sample]) -> Result<Vec<usize>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let (x, rows) = stack_features(samples);
    model.predict_rows(&x, rows)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub trainer: String,
    pub epoch: usize,
    pub config_digest: String,
}

/// On-disk form: layer sizes, shortest-round-trip decimal parameters,
/// metadata, and a digest over all three.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub layer_sizes: Vec<usize>,
    pub params: Vec<Vec<f64>>,
    pub metadata: CheckpointMeta,
    pub digest: String,
}

impl Checkpoint {
    pub fn new(model: &MlpClassifier, metadata: CheckpointMeta) -> Self {
        let params: Vec<Vec<f64>> = model.params.iter().map(|p| p.values().to_vec()).collect();
        let digest = content_digest(&model.layer_sizes, &params, &metadata);
        Checkpoint {
            layer_sizes: model.layer_sizes.clone(),
            params,
            metadata,
            digest,
        }
    }

    pub fn verify(&self) -> std::result::Result<(), String> {
        let expected = content_digest(&self.layer_sizes, &self.params, &self.metadata);
        if expected != self.digest {
            return Err(format!(
                "digest mismatch: recorded {}, content {}",
                self.digest, expected
            ));
        }
        Ok(())
    }

    pub fn into_model(self) -> Result<MlpClassifier> {
        MlpClassifier::from_parts(&self.layer_sizes, self.params)
    }
}

fn content_digest(layer_sizes: &[usize], params: &[Vec<f64>], meta: &CheckpointMeta) -> String {
    let mut h = Sha256::new();
    h.update((layer_sizes.len() as u64).to_le_bytes());
    for s in layer_sizes {
        h.update((*s as u64).to_le_bytes());
    }
    h.update((params.len() as u64).to_le_bytes());
    for p in params {
        h.update((p.len() as u64).to_le_bytes());
        for v in p {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.update(serde_json::to_vec(meta).expect("metadata serializes"));
    hex::encode(h.finalize())
}

pub fn save_checkpoint(model: &MlpClassifier, metadata: CheckpointMeta, path: &Path) -> Result<()> {
    let ckpt = Checkpoint::new(model, metadata);
    let json = serde_json::to_string(&ckpt).expect("checkpoint serializes");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(MlpClassifier, CheckpointMeta)> {
    let fail = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| fail(e.to_string()))?;
    ckpt.verify().map_err(fail)?;
    let meta = ckpt.metadata.clone();
    let model = ckpt.into_model().map_err(|e| fail(e.to_string()))?;
    Ok((model, meta))
}
