use super::{effective_target, PolicyError, PolicyParams, TokenId};
use crate::numerics::kernels;
use crate::numerics::Tensor;

const NORM_EPS: f64 = 1e-5;

/// Incremental (key/value cached) evaluation state for one sequence.
///
/// Produces the same numbers as the tape forward pass in
/// [`super::PolicyGraph`], one position at a time and without gradients.
#[derive(Debug, Clone)]
pub struct KvCache {
    tokens: Vec<TokenId>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    last: Option<Vec<f64>>,
}

impl KvCache {
    pub fn new(params: &PolicyParams) -> Self {
        let blocks = params.config().blocks;
        Self { tokens: Vec::new(), keys: vec![Vec::new(); blocks], values: vec![Vec::new(); blocks], last: None }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// Next-token log-probabilities after the last fed token.
    pub fn last_logprobs(&self) -> Option<&[f64]> {
        self.last.as_deref()
    }

    /// Drops every position from `len` on.
    pub fn truncate(&mut self, len: usize, d: usize) {
        if len < self.tokens.len() {
            self.tokens.truncate(len);
            for k in &mut self.keys {
                k.truncate(len * d);
            }
            for v in &mut self.values {
                v.truncate(len * d);
            }
            self.last = None;
        }
    }
}

fn rms_norm(x: &[f64], gain: &Tensor) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    x.iter().zip(gain.data()).map(|(v, g)| v * inv * g).collect()
}

/// `x[1×in] · w[in×out]`
fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let out_dim = w.cols();
    let mut out = vec![0.0; out_dim];
    for (i, &xi) in x.iter().enumerate() {
        kernels::axpy(xi, w.row(i), &mut out);
    }
    out
}

impl PolicyParams {
    /// Appends one token to `cache` and returns the next-token log-probabilities.
    pub fn feed<'c>(&self, cache: &'c mut KvCache, token: TokenId) -> Result<&'c [f64], PolicyError> {
        let cfg = self.config();
        let (d, heads) = (cfg.d_model, cfg.heads);
        let pos = cache.tokens.len();
        if pos >= cfg.context {
            return Err(PolicyError::Length { needed: pos + 1, context: cfg.context });
        }
        if token as usize >= cfg.vocab_size() {
            return Err(PolicyError::Contract(format!("token id {token} outside vocabulary of {}", cfg.vocab_size())));
        }
        let tensors = self.tensors();
        let mut h: Vec<f64> = tensors[0].row(token as usize).iter().zip(tensors[1].row(pos)).map(|(a, b)| a + b).collect();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let t = pos + 1;
        for b in 0..cfg.blocks {
            let blk = self.block(b);
            let a = rms_norm(&h, &blk[0]);
            let q = vecmat(&a, &blk[1]);
            cache.keys[b].extend(vecmat(&a, &blk[2]));
            cache.values[b].extend(vecmat(&a, &blk[3]));
            let (keys, values) = (&cache.keys[b], &cache.values[b]);
            let mut att = vec![0.0; d];
            let mut scores = vec![0.0; t];
            for hd in 0..heads {
                let qh = &q[hd * dh..(hd + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = kernels::dot(qh, &keys[j * d + hd * dh..j * d + (hd + 1) * dh]) * scale;
                }
                kernels::softmax_in_place(&mut scores);
                let oh = &mut att[hd * dh..(hd + 1) * dh];
                for (j, &p) in scores.iter().enumerate() {
                    kernels::axpy(p, &values[j * d + hd * dh..j * d + (hd + 1) * dh], oh);
                }
            }
            let o = vecmat(&att, &blk[4]);
            kernels::axpy(1.0, &o, &mut h);
            let a2 = rms_norm(&h, &blk[5]);
            let mut z = vecmat(&a2, &blk[6]);
            for (zv, bv) in z.iter_mut().zip(blk[7].data()) {
                *zv = kernels::silu(*zv + bv);
            }
            let mut m = vecmat(&z, &blk[8]);
            kernels::axpy(1.0, blk[9].data(), &mut m);
            kernels::axpy(1.0, &m, &mut h);
        }
        let n = tensors.len();
        let hf = rms_norm(&h, &tensors[n - 3]);
        let mut logits = vecmat(&hf, &tensors[n - 2]);
        kernels::axpy(1.0, tensors[n - 1].data(), &mut logits);
        let mut lp = vec![0.0; logits.len()];
        kernels::log_softmax_row(&logits, &mut lp);
        if lp.iter().any(|v| !v.is_finite()) {
            return Err(crate::numerics::NumericsError::NonFinite { op: "feed" }.into());
        }
        cache.tokens.push(token);
        cache.last = Some(lp);
        Ok(cache.last.as_deref().unwrap_or_default())
    }

    /// Feeds `tokens`, reusing whatever leading run `cache` already holds.
    pub fn feed_all(&self, cache: &mut KvCache, tokens: &[TokenId]) -> Result<(), PolicyError> {
        if tokens.is_empty() {
            return Err(PolicyError::Contract("cannot feed an empty sequence".into()));
        }
        let common = cache.tokens.iter().zip(tokens).take_while(|(a, b)| a == b).count();
        if common == tokens.len() && cache.tokens.len() == tokens.len() && cache.last.is_some() {
            return Ok(());
        }
        // Re-feed at least the final token so its log-probs are current.
        let keep = common.min(tokens.len() - 1);
        cache.truncate(keep, self.config().d_model);
        for &t in &tokens[keep..] {
            self.feed(cache, t)?;
        }
        Ok(())
    }
}

/// `log π(y|x)` and its per-token terms, evaluated without gradients.
///
/// `y` is truncated after its first EOS, so trailing padding is ignored.
pub fn sequence_logprob(params: &PolicyParams, x: &[TokenId], y: &[TokenId]) -> Result<(f64, Vec<f64>), PolicyError> {
    let mut cache = KvCache::new(params);
    score_with_cache(params, &mut cache, x, y)
}

/// Like [`sequence_logprob`] but reuses `cache` across calls; consecutive
/// prompts sharing a prefix are only evaluated once for that prefix.
pub fn score_with_cache(
    params: &PolicyParams,
    cache: &mut KvCache,
    x: &[TokenId],
    y: &[TokenId],
) -> Result<(f64, Vec<f64>), PolicyError> {
    let y = effective_target(y);
    if x.is_empty() || y.is_empty() {
        return Err(PolicyError::Contract("prompt and target must be non-empty".into()));
    }
    let needed = x.len() + y.len() - 1;
    if needed > params.config().context {
        return Err(PolicyError::Length { needed, context: params.config().context });
    }
    params.feed_all(cache, x)?;
    let mut per_token = Vec::with_capacity(y.len());
    for (i, &t) in y.iter().enumerate() {
        let lp = cache.last_logprobs().ok_or_else(|| PolicyError::Contract("cache has no log-probs".into()))?;
        let v = *lp
            .get(t as usize)
            .ok_or_else(|| PolicyError::Contract(format!("token id {t} outside vocabulary")))?;
        per_token.push(v);
        if i + 1 < y.len() {
            params.feed(cache, t)?;
        }
    }
    Ok((per_token.iter().sum(), per_token))
}
