//! Checkpoint files and parameter-space model fusion.
//!
//! All merges produce parameters rounded to f32, so a merged model saved and
//! reloaded is bit-identical to the in-memory result.

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, round_to_f32, save_checkpoint, write_atomic, Manifest, TensorEntry,
    FORMAT_VERSION,
};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;
use crate::policy::{ModelConfig, PolicyParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MergeError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("corrupt checkpoint manifest: {0}")]
    CorruptManifest(String),
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u64),
    #[error("tensor {name} overlaps the previous tensor")]
    Overlap { name: String },
    #[error("bad checkpoint layout: {0}")]
    Layout(String),
    #[error("checkpoint payload truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("checkpoint payload has trailing bytes: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: u64, actual: u64 },
    #[error("config fingerprint {found} does not match manifest {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),
    #[error("invalid merge configuration: {0}")]
    Config(String),
    #[error("tensor {0} has zero norm")]
    DegenerateTensor(String),
}

impl MergeError {
    pub(crate) fn io(path: &Path, e: &std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), message: e.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Ties,
    Slerp,
    Lerp,
}

impl std::str::FromStr for Algorithm {
    type Err = MergeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ties" => Ok(Self::Ties),
            "slerp" => Ok(Self::Slerp),
            "lerp" => Ok(Self::Lerp),
            other => Err(MergeError::Config(format!("unknown merge algorithm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub algorithm: Algorithm,
    pub weights: Vec<f64>,
    /// Fraction of each task vector kept by TIES trimming.
    pub density: f64,
    /// TIES output scale.
    pub lambda: f64,
    /// SLERP falls back to linear interpolation above this `|cos Ω|`.
    pub parallel_threshold: f64,
}

impl MergeConfig {
    pub fn new(algorithm: Algorithm, weights: Vec<f64>) -> Self {
        Self { algorithm, weights, density: 0.2, lambda: 1.0, parallel_threshold: 0.9995 }
    }

    pub fn validate(&self) -> Result<(), MergeError> {
        if self.weights.is_empty() {
            return Err(MergeError::Config("no model weights given".into()));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(MergeError::Config("weights must be finite and non-negative".into()));
        }
        if self.weights.iter().all(|&w| w == 0.0) {
            return Err(MergeError::Config("weights are all zero".into()));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(MergeError::Config(format!("density must lie in (0, 1], got {}", self.density)));
        }
        if !self.lambda.is_finite() {
            return Err(MergeError::Config("lambda must be finite".into()));
        }
        if !(self.parallel_threshold > 0.0 && self.parallel_threshold <= 1.0) {
            return Err(MergeError::Config("parallel threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-tensor difference between a fine-tuned model and its base.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl TaskVector {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }
}

fn same_architecture(a: &ModelConfig, b: &ModelConfig) -> bool {
    a.vocab == b.vocab && a.d_model == b.d_model && a.blocks == b.blocks && a.heads == b.heads && a.context == b.context
}

/// Names, shapes and architecture must agree; the init seed may differ.
pub fn check_compatible(a: &PolicyParams, b: &PolicyParams) -> Result<(), MergeError> {
    if !same_architecture(a.config(), b.config()) {
        return Err(MergeError::Incompatible("model configurations differ".into()));
    }
    if a.names() != b.names() {
        let missing = a.names().iter().find(|n| !b.names().contains(n));
        return Err(MergeError::Incompatible(match missing {
            Some(n) => format!("tensor {n} missing from the other model"),
            None => "tensor names differ".into(),
        }));
    }
    for ((name, ta), tb) in a.iter().zip(b.tensors()) {
        if ta.shape() != tb.shape() {
            return Err(MergeError::Incompatible(format!("tensor {name}: shape {:?} vs {:?}", ta.shape(), tb.shape())));
        }
    }
    Ok(())
}

pub fn task_vector(model: &PolicyParams, base: &PolicyParams) -> Result<TaskVector, MergeError> {
    check_compatible(model, base)?;
    let tensors = model
        .tensors()
        .iter()
        .zip(base.tensors())
        .map(|(m, b)| {
            let data = m.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
            Tensor::new(m.shape().to_vec(), data).map_err(|e| MergeError::Incompatible(e.to_string()))
        })
        .collect::<Result<_, _>>()?;
    Ok(TaskVector { names: model.names().to_vec(), tensors })
}

fn finish(template: &PolicyParams, tensors: Vec<Vec<f64>>) -> Result<PolicyParams, MergeError> {
    let tensors = template
        .tensors()
        .iter()
        .zip(tensors)
        .map(|(t, data)| {
            let data = data.into_iter().map(|v| v as f32 as f64).collect();
            Tensor::new(t.shape().to_vec(), data).map_err(|e| MergeError::Config(format!("merge produced {e}")))
        })
        .collect::<Result<_, _>>()?;
    template.with_tensors(tensors).map_err(|e| MergeError::Incompatible(e.to_string()))
}

/// Zeroes all but the `⌈density·n⌉` largest-magnitude entries. Equal
/// magnitudes keep the lower index.
pub fn trim(values: &[f64], density: f64) -> Vec<f64> {
    let n = values.len();
    let k = ((density * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[j].abs().total_cmp(&values[i].abs()).then(i.cmp(&j)));
    let mut out = vec![0.0; n];
    for &i in &order[..k] {
        out[i] = values[i];
    }
    out
}

/// Order-independent sum: contributions are added in a canonical order.
fn canonical_sum(terms: &mut [(f64, f64)]) -> f64 {
    terms.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    terms.iter().map(|(v, w)| v * w).sum()
}

/// TIES: trim each task vector, elect a sign per coordinate, then average
/// the surviving values that agree with it.
pub fn ties_merge(base: &PolicyParams, models: &[&PolicyParams], cfg: &MergeConfig) -> Result<PolicyParams, MergeError> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(MergeError::Config("ties needs at least one model".into()));
    }
    if cfg.weights.len() != models.len() {
        return Err(MergeError::Config(format!("{} weights for {} models", cfg.weights.len(), models.len())));
    }
    let taus = models.iter().map(|m| task_vector(m, base)).collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::with_capacity(base.tensors().len());
    for (ti, b) in base.tensors().iter().enumerate() {
        let trimmed: Vec<Vec<f64>> = taus.iter().map(|tv| trim(tv.tensors[ti].data(), cfg.density)).collect();
        let mut merged = Vec::with_capacity(b.numel());
        let mut terms = Vec::with_capacity(models.len());
        for (c, &bv) in b.data().iter().enumerate() {
            terms.clear();
            terms.extend(trimmed.iter().zip(&cfg.weights).map(|(t, &w)| (t[c], w)).filter(|(v, w)| *v != 0.0 && *w > 0.0));
            let positive = canonical_sum(&mut terms) >= 0.0;
            terms.retain(|(v, _)| (*v > 0.0) == positive);
            let delta = if terms.is_empty() {
                0.0
            } else {
                let total_w: f64 = {
                    let mut ws: Vec<f64> = terms.iter().map(|t| t.1).collect();
                    ws.sort_by(f64::total_cmp);
                    ws.iter().sum()
                };
                canonical_sum(&mut terms) / total_w
            };
            merged.push(bv + cfg.lambda * delta);
        }
        out.push(merged);
    }
    finish(base, out)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Spherical interpolation of one flattened tensor with linearly
/// interpolated magnitude.
pub fn slerp_vec(a: &[f64], b: &[f64], t: f64, parallel_threshold: f64) -> Result<Vec<f64>, &'static str> {
    let lerp = || a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect();
    if a == b {
        return Ok(lerp());
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err("zero norm");
    }
    let cos = (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0);
    if cos.abs() > parallel_threshold {
        return Ok(lerp());
    }
    let omega = cos.acos();
    let s = omega.sin();
    let ca = ((1.0 - t) * omega).sin() / s;
    let cb = (t * omega).sin() / s;
    let mag = (1.0 - t) * na + t * nb;
    Ok(a.iter().zip(b).map(|(x, y)| mag * (ca * x / na + cb * y / nb)).collect())
}

fn check_t(t: f64) -> Result<(), MergeError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(MergeError::Config(format!("interpolation factor must lie in [0, 1], got {t}")));
    }
    Ok(())
}

pub fn slerp_merge(a: &PolicyParams, b: &PolicyParams, t: f64, parallel_threshold: f64) -> Result<PolicyParams, MergeError> {
    check_t(t)?;
    check_compatible(a, b)?;
    let out = a
        .iter()
        .zip(b.tensors())
        .map(|((name, ta), tb)| {
            slerp_vec(ta.data(), tb.data(), t, parallel_threshold).map_err(|_| MergeError::DegenerateTensor(name.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    finish(a, out)
}

pub fn lerp_merge(a: &PolicyParams, b: &PolicyParams, t: f64) -> Result<PolicyParams, MergeError> {
    check_t(t)?;
    check_compatible(a, b)?;
    let out = a
        .tensors()
        .iter()
        .zip(b.tensors())
        .map(|(ta, tb)| ta.data().iter().zip(tb.data()).map(|(x, y)| (1.0 - t) * x + t * y).collect())
        .collect();
    finish(a, out)
}

/// Interpolation weight of the second model under an `w_a : w_b` ratio.
pub fn ratio_to_t(w_a: f64, w_b: f64) -> Result<f64, MergeError> {
    if !(w_a >= 0.0 && w_b >= 0.0 && w_a.is_finite() && w_b.is_finite()) {
        return Err(MergeError::Config("ratio weights must be finite and non-negative".into()));
    }
    if w_a + w_b == 0.0 {
        return Err(MergeError::Config("ratio weights are both zero".into()));
    }
    Ok(w_b / (w_a + w_b))
}

/// Runs the configured algorithm. Two-model algorithms take their factor
/// from the weight ratio; TIES requires `base`.
pub fn merge(cfg: &MergeConfig, base: Option<&PolicyParams>, models: &[&PolicyParams]) -> Result<PolicyParams, MergeError> {
    cfg.validate()?;
    if cfg.weights.len() != models.len() {
        return Err(MergeError::Config(format!("{} weights for {} models", cfg.weights.len(), models.len())));
    }
    match cfg.algorithm {
        Algorithm::Ties => {
            let base = base.ok_or_else(|| MergeError::Config("ties needs a base model".into()))?;
            ties_merge(base, models, cfg)
        }
        Algorithm::Slerp | Algorithm::Lerp => {
            let [a, b] = models else {
                return Err(MergeError::Config(format!("{:?} merges exactly two models", cfg.algorithm)));
            };
            let t = ratio_to_t(cfg.weights[0], cfg.weights[1])?;
            if cfg.algorithm == Algorithm::Slerp {
                slerp_merge(a, b, t, cfg.parallel_threshold)
            } else {
                lerp_merge(a, b, t)
            }
        }
    }
}

/// Largest absolute coordinate difference between two compatible models.
pub fn max_abs_diff(a: &PolicyParams, b: &PolicyParams) -> Result<f64, MergeError> {
    check_compatible(a, b)?;
    Ok(a.tensors()
        .iter()
        .zip(b.tensors())
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max))
}
