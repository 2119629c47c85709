use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PolicyError, Vocab};
use crate::numerics::Tensor;

/// Shape of the causal character model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: Vocab,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Maximum number of positions (prompt plus target) the model can see.
    pub context: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.d_model == 0 || self.blocks == 0 || self.heads == 0 || self.context == 0 {
            return Err(PolicyError::Config("d_model, blocks, heads and context must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(PolicyError::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding of the configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Parameter names and shapes in canonical order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, h) = (self.vocab_size(), self.d_model, self.mlp_hidden());
        let mut specs = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.context, d]),
        ];
        for b in 0..self.blocks {
            let p = |n: &str| format!("blocks.{b}.{n}");
            specs.extend([
                (p("norm1"), vec![d]),
                (p("wq"), vec![d, d]),
                (p("wk"), vec![d, d]),
                (p("wv"), vec![d, d]),
                (p("wo"), vec![d, d]),
                (p("norm2"), vec![d]),
                (p("w1"), vec![d, h]),
                (p("b1"), vec![h]),
                (p("w2"), vec![h, d]),
                (p("b2"), vec![d]),
            ]);
        }
        specs.extend([
            ("norm_f".to_string(), vec![d]),
            ("w_out".to_string(), vec![d, v]),
            ("b_out".to_string(), vec![v]),
        ]);
        specs
    }
}

/// Number of tensors per transformer block in [`ModelConfig::param_specs`].
pub(crate) const BLOCK_TENSORS: usize = 10;

/// Named parameter tensors of one policy, in [`ModelConfig::param_specs`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl PolicyParams {
    /// Assembles parameters, checking names, order, shapes and finiteness
    /// against the configuration.
    pub fn from_tensors(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, PolicyError> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != named.len() {
            return Err(PolicyError::Config(format!("expected {} tensors, got {}", specs.len(), named.len())));
        }
        for ((name, shape), (n, t)) in specs.iter().zip(&named) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(PolicyError::Config(format!(
                    "tensor {n} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(PolicyError::Config(format!("tensor {n} has non-finite values")));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self { config, names, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.config.vocab
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub(crate) fn block(&self, b: usize) -> &[Tensor] {
        &self.tensors[2 + b * BLOCK_TENSORS..2 + (b + 1) * BLOCK_TENSORS]
    }

    /// Rebuilds the parameter set with new values, keeping config and names.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self, PolicyError> {
        let named = self.names.iter().cloned().zip(tensors).collect();
        Self::from_tensors(self.config.clone(), named)
    }
}

/// Deterministic scaled-uniform initialization.
///
/// Projections draw from `U(-1/√fan_in, 1/√fan_in)`; projections that write
/// into the residual stream are further scaled by `1/√(2·blocks)`. Norm gains
/// start at one and biases at zero.
pub fn init_params(cfg: &ModelConfig) -> Result<PolicyParams, PolicyError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let residual_scale = 1.0 / ((2 * cfg.blocks) as f64).sqrt();
    let mut named = Vec::new();
    for (name, shape) in cfg.param_specs() {
        let n: usize = shape.iter().product();
        let leaf = name.rsplit('.').next().unwrap_or(&name);
        let data: Vec<f64> = match leaf {
            "norm1" | "norm2" | "norm_f" => vec![1.0; n],
            "b1" | "b2" | "b_out" => vec![0.0; n],
            _ => {
                let fan_in = if leaf.ends_with("emb") { shape[1] } else { shape[0] };
                let mut bound = 1.0 / (fan_in as f64).sqrt();
                if leaf == "wo" || leaf == "w2" {
                    bound *= residual_scale;
                }
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        named.push((name, Tensor::new(shape, data)?));
    }
    PolicyParams::from_tensors(cfg.clone(), named)
}
