use super::model::BLOCK_TENSORS;
use super::{effective_target, ModelConfig, PolicyError, PolicyParams, TokenId};
use crate::numerics::{Tape, Var};

const NORM_EPS: f64 = 1e-5;

/// A policy whose parameters are recorded on a tape, ready for a
/// differentiable forward pass.
#[derive(Debug, Clone)]
pub struct PolicyGraph {
    config: ModelConfig,
    vars: Vec<Var>,
}

struct BlockVars {
    norm1: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    norm2: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl PolicyGraph {
    /// Records every parameter tensor as a leaf. Gradients flow to them only
    /// when `trainable` is set.
    pub fn register(tape: &mut Tape, params: &PolicyParams, trainable: bool) -> Result<Self, PolicyError> {
        let vars = params
            .tensors()
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { config: params.config().clone(), vars })
    }

    /// Wraps already-recorded leaves, which must follow the canonical order of
    /// [`ModelConfig::param_specs`].
    pub fn from_vars(config: &ModelConfig, vars: Vec<Var>) -> Result<Self, PolicyError> {
        let expected = config.param_specs().len();
        if vars.len() != expected {
            return Err(PolicyError::Config(format!("expected {expected} parameter vars, got {}", vars.len())));
        }
        Ok(Self { config: config.clone(), vars })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Current parameter values as a detached [`PolicyParams`].
    pub fn snapshot(&self, tape: &Tape) -> Result<PolicyParams, PolicyError> {
        let named = self
            .config
            .param_specs()
            .into_iter()
            .zip(&self.vars)
            .map(|((name, _), &v)| (name, tape.value(v).clone()))
            .collect();
        PolicyParams::from_tensors(self.config.clone(), named)
    }

    fn block(&self, b: usize) -> BlockVars {
        let v = &self.vars[2 + b * BLOCK_TENSORS..2 + (b + 1) * BLOCK_TENSORS];
        BlockVars {
            norm1: v[0],
            wq: v[1],
            wk: v[2],
            wv: v[3],
            wo: v[4],
            norm2: v[5],
            w1: v[6],
            b1: v[7],
            w2: v[8],
            b2: v[9],
        }
    }

    fn tail(&self) -> (Var, Var, Var) {
        let n = self.vars.len();
        (self.vars[n - 3], self.vars[n - 2], self.vars[n - 1])
    }

    fn embed(&self, tape: &mut Tape, tokens: &[TokenId], start: usize) -> Result<Var, PolicyError> {
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (start..start + tokens.len()).collect();
        let tok = tape.gather_rows(self.vars[0], &ids)?;
        let pos = tape.gather_rows(self.vars[1], &positions)?;
        Ok(tape.add(tok, pos)?)
    }

    fn mlp(&self, tape: &mut Tape, blk: &BlockVars, h: Var) -> Result<Var, PolicyError> {
        let a = tape.rms_norm(h, blk.norm2, NORM_EPS)?;
        let z = tape.matmul(a, blk.w1)?;
        let z = tape.add_row(z, blk.b1)?;
        let z = tape.silu(z)?;
        let z = tape.matmul(z, blk.w2)?;
        let z = tape.add_row(z, blk.b2)?;
        Ok(tape.add(h, z)?)
    }

    /// Per-token log-probabilities `log π(y_t | x, y_<t)` for every pair in a
    /// batch, each returned as a vector var of length `|y|` (after truncating
    /// `y` at its first EOS).
    ///
    /// Prompts that share a leading run of tokens are processed once for that
    /// run; the remainder of each sequence attends to the shared keys and
    /// values. Only target positions go through the last block's attention,
    /// MLP and the output head.
    pub fn token_logprobs(&self, tape: &mut Tape, batch: &[(&[TokenId], &[TokenId])]) -> Result<Vec<Var>, PolicyError> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let v = self.config.vocab_size() as TokenId;
        let mut pairs = Vec::with_capacity(batch.len());
        for &(x, y) in batch {
            let y = effective_target(y);
            if x.is_empty() || y.is_empty() {
                return Err(PolicyError::Contract("prompt and target must be non-empty".into()));
            }
            if let Some(&bad) = x.iter().chain(y).find(|&&t| t >= v) {
                return Err(PolicyError::Contract(format!("token id {bad} outside vocabulary of {v}")));
            }
            let needed = x.len() + y.len() - 1;
            if needed > self.config.context {
                return Err(PolicyError::Length { needed, context: self.config.context });
            }
            pairs.push((x, y));
        }

        let min_x = pairs.iter().map(|(x, _)| x.len()).min().unwrap_or(0);
        let first = pairs[0].0;
        let mut shared = 0;
        while shared + 1 < min_x && pairs.iter().all(|(x, _)| x[shared] == first[shared]) {
            shared += 1;
        }

        let blocks = self.config.blocks;
        let heads = self.config.heads;
        // Keys/values of the shared prefix for every block.
        let mut prefix_kv: Vec<Option<(Var, Var)>> = vec![None; blocks];
        if shared > 0 {
            let mut h = self.embed(tape, &first[..shared], 0)?;
            for (b, slot) in prefix_kv.iter_mut().enumerate() {
                let blk = self.block(b);
                let a = tape.rms_norm(h, blk.norm1, NORM_EPS)?;
                let k = tape.matmul(a, blk.wk)?;
                let vv = tape.matmul(a, blk.wv)?;
                *slot = Some((k, vv));
                if b + 1 < blocks {
                    let q = tape.matmul(a, blk.wq)?;
                    let att = tape.causal_attention(q, k, vv, heads, 0)?;
                    let o = tape.matmul(att, blk.wo)?;
                    let h1 = tape.add(h, o)?;
                    h = self.mlp(tape, &blk, h1)?;
                }
            }
        }

        let (norm_f, w_out, b_out) = self.tail();
        let mut out = Vec::with_capacity(pairs.len());
        for (x, y) in pairs {
            let mut seq: Vec<TokenId> = x.to_vec();
            seq.extend_from_slice(&y[..y.len() - 1]);
            let seg = &seq[shared..];
            // Segment row of the first position that predicts a target token.
            let target_row = x.len() - 1 - shared;
            let mut h = self.embed(tape, seg, shared)?;
            for (b, kv) in prefix_kv.iter().enumerate() {
                let blk = self.block(b);
                let a = tape.rms_norm(h, blk.norm1, NORM_EPS)?;
                let k_own = tape.matmul(a, blk.wk)?;
                let v_own = tape.matmul(a, blk.wv)?;
                let (k, vv) = match kv {
                    Some((kp, vp)) => (tape.concat_rows(&[*kp, k_own])?, tape.concat_rows(&[*vp, v_own])?),
                    None => (k_own, v_own),
                };
                let (a_q, h_res, q_start) = if b + 1 == blocks {
                    let a_t = tape.slice_rows(a, target_row, y.len())?;
                    let h_t = tape.slice_rows(h, target_row, y.len())?;
                    (a_t, h_t, x.len() - 1)
                } else {
                    (a, h, shared)
                };
                let q = tape.matmul(a_q, blk.wq)?;
                let att = tape.causal_attention(q, k, vv, heads, q_start)?;
                let o = tape.matmul(att, blk.wo)?;
                let h1 = tape.add(h_res, o)?;
                h = self.mlp(tape, &blk, h1)?;
            }
            let hf = tape.rms_norm(h, norm_f, NORM_EPS)?;
            let logits = tape.matmul(hf, w_out)?;
            let logits = tape.add_row(logits, b_out)?;
            let lp = tape.log_softmax(logits)?;
            let coords: Vec<(usize, usize)> = y.iter().enumerate().map(|(i, &t)| (i, t as usize)).collect();
            out.push(tape.pick(lp, &coords)?);
        }
        Ok(out)
    }

    /// Sequence log-likelihoods `log π(y|x)` (sums over target tokens) as
    /// scalar vars.
    pub fn sequence_logprobs(&self, tape: &mut Tape, batch: &[(&[TokenId], &[TokenId])]) -> Result<Vec<Var>, PolicyError> {
        let per_token = self.token_logprobs(tape, batch)?;
        per_token
            .into_iter()
            .map(|v| tape.sum(v).map_err(PolicyError::from))
            .collect()
    }
}
