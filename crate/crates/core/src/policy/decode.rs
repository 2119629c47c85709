use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{KvCache, PolicyError, PolicyParams, TokenId, EOS, NUM_SPECIALS};

/// Tokens a decoder may emit: EOS and every character symbol.
fn emittable(id: usize) -> bool {
    id == EOS as usize || id >= NUM_SPECIALS
}

fn prime(p: &PolicyParams, cache: &mut KvCache, x: &[TokenId]) -> Result<(), PolicyError> {
    if x.is_empty() || x.len() >= p.config().context {
        return Err(PolicyError::Length { needed: x.len() + 1, context: p.config().context });
    }
    p.feed_all(cache, x)
}

/// Argmax decoding; lowest id wins ties. Stops at EOS (not included), at
/// `max_len` tokens, or when the context is full.
pub fn greedy_decode(p: &PolicyParams, x: &[TokenId], max_len: usize) -> Result<Vec<TokenId>, PolicyError> {
    let mut cache = KvCache::new(p);
    greedy_decode_cached(p, &mut cache, x, max_len)
}

/// [`greedy_decode`] reusing a cache whose leading tokens may match `x`.
pub fn greedy_decode_cached(p: &PolicyParams, cache: &mut KvCache, x: &[TokenId], max_len: usize) -> Result<Vec<TokenId>, PolicyError> {
    if max_len == 0 {
        return Ok(Vec::new());
    }
    prime(p, cache, x)?;
    let mut out = Vec::new();
    while out.len() < max_len {
        let lp = cache.last_logprobs().unwrap_or_default();
        let mut best: Option<(usize, f64)> = None;
        for (id, &v) in lp.iter().enumerate() {
            if emittable(id) && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((id, v));
            }
        }
        let Some((id, _)) = best else { break };
        let id = id as TokenId;
        if id == EOS || cache.len() >= p.config().context {
            break;
        }
        out.push(id);
        if out.len() < max_len {
            p.feed(cache, id)?;
        }
    }
    Ok(out)
}

/// Temperature sampling with a seeded ChaCha stream; same stopping rules as
/// [`greedy_decode`].
pub fn sample_decode(
    p: &PolicyParams,
    x: &[TokenId],
    max_len: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<TokenId>, PolicyError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(PolicyError::Contract(format!("temperature must be positive, got {temperature}")));
    }
    if max_len == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache = KvCache::new(p);
    prime(p, &mut cache, x)?;
    let mut out = Vec::new();
    let mut weights = Vec::new();
    while out.len() < max_len {
        let lp = cache.last_logprobs().unwrap_or_default();
        let max = lp
            .iter()
            .enumerate()
            .filter(|(id, _)| emittable(*id))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        weights.clear();
        weights.extend(lp.iter().enumerate().map(|(id, &v)| {
            if emittable(id) {
                ((v - max) / temperature).exp()
            } else {
                0.0
            }
        }));
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut id = weights.len() - 1;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 && u < w {
                id = i;
                break;
            }
            u -= w;
        }
        let id = id as TokenId;
        if id == EOS || cache.len() >= p.config().context {
            break;
        }
        out.push(id);
        if out.len() < max_len {
            p.feed(&mut cache, id)?;
        }
    }
    Ok(out)
}
