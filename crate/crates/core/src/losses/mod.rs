//! Preference-optimization objectives over sequence log-likelihoods.
//!
//! Every tape-level loss comes in two forms: one that runs the policy forward
//! itself, and a `*_from_logps` form that takes already-recorded log-prob
//! vars. The second form is what the training loops use when reference
//! log-probs have been computed ahead of time.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{kernels, NumericsError, Tape, Var};
use crate::policy::{KvCache, PolicyError, PolicyGraph, PolicyParams, TokenId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub beta: f64,
    pub lambda_p: f64,
    pub lambda_d: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { beta: 0.1, lambda_p: 1.0, lambda_d: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [("beta", self.beta), ("lambda_p", self.lambda_p), ("lambda_d", self.lambda_d)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LossError::Contract(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Preferred,
    Dispreferred,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    pub x: Vec<TokenId>,
    pub y_w: Vec<TokenId>,
    pub y_l: Vec<TokenId>,
}

impl Triple {
    pub fn is_degenerate(&self) -> bool {
        self.y_w == self.y_l
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchTriples {
    items: Vec<Triple>,
}

impl BatchTriples {
    pub fn new(items: Vec<Triple>) -> Result<Self, LossError> {
        if items.is_empty() {
            return Err(LossError::Contract("triple batch is empty".into()));
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[Triple] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Number of triples whose preferred and dispreferred outputs coincide.
    pub fn degenerate_count(&self) -> usize {
        self.items.iter().filter(|t| t.is_degenerate()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Desirable {
    pub x: Vec<TokenId>,
    pub y: Vec<TokenId>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchDesirability {
    items: Vec<Desirable>,
}

impl BatchDesirability {
    pub fn new(items: Vec<Desirable>) -> Result<Self, LossError> {
        if items.is_empty() {
            return Err(LossError::Contract("desirability batch is empty".into()));
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[Desirable] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `(x_i, y_{i+1 mod n})` pairs used by the reference-point estimator.
    pub fn mismatched_pairs(&self) -> Vec<(&[TokenId], &[TokenId])> {
        let n = self.items.len();
        (0..n).map(|i| (self.items[i].x.as_slice(), self.items[(i + 1) % n].y.as_slice())).collect()
    }
}

/// KTO reference point and the per-example implicit rewards.
#[derive(Debug, Clone)]
pub struct KtoBatchState {
    /// Detached; never receives gradient.
    pub z_ref: f64,
    pub rewards: Vec<Var>,
}

fn finite(op: &'static str, vals: &[f64]) -> Result<(), LossError> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite { op }.into())
    }
}

/// Bradley–Terry probability that the first response is preferred.
pub fn bt_preference_prob(r_w: f64, r_l: f64) -> Result<f64, LossError> {
    finite("bt_preference_prob", &[r_w, r_l])?;
    Ok(kernels::sigmoid(r_w - r_l))
}

/// Reward-model negative log-likelihood `-log σ(r_w - r_l)`.
pub fn reward_pair_loss(r_w: f64, r_l: f64) -> Result<f64, LossError> {
    finite("reward_pair_loss", &[r_w, r_l])?;
    Ok(kernels::softplus(r_l - r_w))
}

pub fn kto_value(r: f64, z_ref: f64, label: Label) -> f64 {
    match label {
        Label::Preferred => kernels::sigmoid(r - z_ref),
        Label::Dispreferred => kernels::sigmoid(z_ref - r),
    }
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var, LossError> {
    if terms.is_empty() {
        return Err(LossError::Contract("cannot average an empty batch".into()));
    }
    let v = tape.stack(terms)?;
    Ok(tape.mean(v)?)
}

/// `-log σ(z)` for a scalar var.
fn neg_log_sigmoid(tape: &mut Tape, z: Var) -> Result<Var, LossError> {
    let ls = tape.log_sigmoid(z)?;
    Ok(tape.neg(ls)?)
}

fn check_lengths(what: &str, a: usize, b: usize) -> Result<(), LossError> {
    if a != b {
        return Err(LossError::Contract(format!("{what}: lengths {a} and {b} differ")));
    }
    Ok(())
}

/// Log-likelihoods scored without gradients.
///
/// Uses the same forward pass as training, so a policy identical to the
/// reference reproduces these values bit for bit.
pub fn reference_logps(reference: &PolicyParams, pairs: &[(&[TokenId], &[TokenId])]) -> Result<Vec<f64>, LossError> {
    let mut tape = Tape::new();
    let graph = PolicyGraph::register(&mut tape, reference, false)?;
    let lps = graph.sequence_logprobs(&mut tape, pairs)?;
    Ok(lps.into_iter().map(|v| tape.scalar(v)).collect())
}

fn triple_pairs(batch: &BatchTriples) -> (Vec<(&[TokenId], &[TokenId])>, Vec<(&[TokenId], &[TokenId])>) {
    batch
        .items()
        .iter()
        .map(|t| ((t.x.as_slice(), t.y_w.as_slice()), (t.x.as_slice(), t.y_l.as_slice())))
        .unzip()
}

/// Policy log-likelihoods of every preferred and dispreferred output, in one
/// batched forward pass.
pub fn triple_logps(tape: &mut Tape, policy: &PolicyGraph, batch: &BatchTriples) -> Result<(Vec<Var>, Vec<Var>), LossError> {
    let (w, l) = triple_pairs(batch);
    let all: Vec<_> = w.into_iter().chain(l).collect();
    let mut lps = policy.sequence_logprobs(tape, &all)?;
    let lose = lps.split_off(batch.len());
    Ok((lps, lose))
}

/// Reference log-likelihoods of `(y_w, y_l)` for each triple.
pub fn triple_reference_logps(reference: &PolicyParams, batch: &BatchTriples) -> Result<Vec<(f64, f64)>, LossError> {
    let (w, l) = triple_pairs(batch);
    let all: Vec<_> = w.into_iter().chain(l).collect();
    let mut rw = reference_logps(reference, &all)?;
    let rl = rw.split_off(batch.len());
    Ok(rw.into_iter().zip(rl).collect())
}

pub fn sft_from_logps(tape: &mut Tape, logps: &[Var]) -> Result<Var, LossError> {
    let m = mean_of(tape, logps)?;
    Ok(tape.neg(m)?)
}

/// Mean negative log-likelihood of the targets.
pub fn sft_loss(tape: &mut Tape, policy: &PolicyGraph, batch: &[(&[TokenId], &[TokenId])]) -> Result<Var, LossError> {
    if batch.is_empty() {
        return Err(LossError::Contract("sft batch is empty".into()));
    }
    let lps = policy.sequence_logprobs(tape, batch)?;
    sft_from_logps(tape, &lps)
}

pub fn dpo_from_logps(
    tape: &mut Tape,
    policy_w: &[Var],
    policy_l: &[Var],
    reference: &[(f64, f64)],
    beta: f64,
) -> Result<Var, LossError> {
    check_lengths("dpo policy logps", policy_w.len(), policy_l.len())?;
    check_lengths("dpo reference logps", policy_w.len(), reference.len())?;
    let mut terms = Vec::with_capacity(policy_w.len());
    for ((&w, &l), &(rw, rl)) in policy_w.iter().zip(policy_l).zip(reference) {
        let diff = tape.sub(w, l)?;
        let z = tape.shift(diff, rl - rw)?;
        let z = tape.scale(z, beta)?;
        terms.push(neg_log_sigmoid(tape, z)?);
    }
    mean_of(tape, &terms)
}

pub fn dpo_loss(
    tape: &mut Tape,
    policy: &PolicyGraph,
    reference: Option<&PolicyParams>,
    batch: &BatchTriples,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    cfg.validate()?;
    let reference = reference.ok_or_else(|| LossError::Contract("dpo needs a reference model".into()))?;
    let ref_lps = triple_reference_logps(reference, batch)?;
    let (w, l) = triple_logps(tape, policy, batch)?;
    dpo_from_logps(tape, &w, &l, &ref_lps, cfg.beta)
}

#[derive(Debug, Clone, Copy)]
pub struct CpoTerms {
    pub total: Var,
    pub prefer: Var,
    pub nll: Var,
}

pub fn cpo_from_logps(tape: &mut Tape, policy_w: &[Var], policy_l: &[Var], beta: f64) -> Result<CpoTerms, LossError> {
    check_lengths("cpo policy logps", policy_w.len(), policy_l.len())?;
    let mut terms = Vec::with_capacity(policy_w.len());
    for (&w, &l) in policy_w.iter().zip(policy_l) {
        let diff = tape.sub(w, l)?;
        let z = tape.scale(diff, beta)?;
        terms.push(neg_log_sigmoid(tape, z)?);
    }
    let prefer = mean_of(tape, &terms)?;
    let nll = sft_from_logps(tape, policy_w)?;
    let total = tape.add(prefer, nll)?;
    Ok(CpoTerms { total, prefer, nll })
}

/// Reference-free preference loss plus an NLL term on the preferred outputs.
pub fn cpo_loss(tape: &mut Tape, policy: &PolicyGraph, batch: &BatchTriples, cfg: &LossConfig) -> Result<CpoTerms, LossError> {
    cfg.validate()?;
    let (w, l) = triple_logps(tape, policy, batch)?;
    cpo_from_logps(tape, &w, &l, cfg.beta)
}

/// Clamped batch estimate of the KTO reference point from mismatched-pair
/// log-likelihoods under the policy and the reference.
pub fn zref_from_logps(policy: &[f64], reference: &[f64], beta: f64) -> Result<f64, LossError> {
    check_lengths("z_ref logps", policy.len(), reference.len())?;
    if policy.is_empty() {
        return Err(LossError::Contract("z_ref needs at least one pair".into()));
    }
    let mean = policy.iter().zip(reference).map(|(p, r)| p - r).sum::<f64>() / policy.len() as f64;
    let z = (beta * mean).max(0.0);
    finite("kto_zref", &[z])?;
    Ok(z)
}

fn check_kto_batch(batch: &BatchDesirability) -> Result<(), LossError> {
    if batch.len() < 2 {
        return Err(LossError::Contract("kto needs a batch of at least two examples".into()));
    }
    Ok(())
}

fn desirability_pairs(batch: &BatchDesirability) -> Vec<(&[TokenId], &[TokenId])> {
    batch.items().iter().map(|d| (d.x.as_slice(), d.y.as_slice())).collect()
}

/// Reference point and rewards for a KTO batch. The rewards stay on the tape.
pub fn kto_zref(
    tape: &mut Tape,
    policy: &PolicyGraph,
    reference: Option<&PolicyParams>,
    batch: &BatchDesirability,
    cfg: &LossConfig,
) -> Result<KtoBatchState, LossError> {
    cfg.validate()?;
    check_kto_batch(batch)?;
    let reference = reference.ok_or_else(|| LossError::Contract("kto needs a reference model".into()))?;
    let current = policy.snapshot(tape)?;
    let mismatched = batch.mismatched_pairs();
    let z_ref = zref_from_logps(
        &reference_logps(&current, &mismatched)?,
        &reference_logps(reference, &mismatched)?,
        cfg.beta,
    )?;
    let ref_lps = reference_logps(reference, &desirability_pairs(batch))?;
    let lps = policy.sequence_logprobs(tape, &desirability_pairs(batch))?;
    let rewards = kto_rewards(tape, &lps, &ref_lps, cfg.beta)?;
    Ok(KtoBatchState { z_ref, rewards })
}

/// `β·(log π_θ(y|x) - log π_ref(y|x))` per example.
pub fn kto_rewards(tape: &mut Tape, policy: &[Var], reference: &[f64], beta: f64) -> Result<Vec<Var>, LossError> {
    check_lengths("kto logps", policy.len(), reference.len())?;
    policy
        .iter()
        .zip(reference)
        .map(|(&p, &r)| {
            let d = tape.shift(p, -r)?;
            Ok(tape.scale(d, beta)?)
        })
        .collect()
}

/// Weighted mean of `1 - v_KTO` given rewards and a fixed reference point.
pub fn kto_from_rewards(
    tape: &mut Tape,
    rewards: &[Var],
    labels: &[Label],
    z_ref: f64,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    check_lengths("kto labels", rewards.len(), labels.len())?;
    let mut terms = Vec::with_capacity(rewards.len());
    for (&r, &label) in rewards.iter().zip(labels) {
        // 1 - σ(r - z) = σ(z - r); 1 - σ(z - r) = σ(r - z)
        let z = match label {
            Label::Preferred => {
                let n = tape.neg(r)?;
                tape.shift(n, z_ref)?
            }
            Label::Dispreferred => tape.shift(r, -z_ref)?,
        };
        let s = tape.sigmoid(z)?;
        let w = match label {
            Label::Preferred => cfg.lambda_p,
            Label::Dispreferred => cfg.lambda_d,
        };
        terms.push(tape.scale(s, w)?);
    }
    mean_of(tape, &terms)
}

pub fn kto_loss(
    tape: &mut Tape,
    policy: &PolicyGraph,
    reference: Option<&PolicyParams>,
    batch: &BatchDesirability,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    let state = kto_zref(tape, policy, reference, batch, cfg)?;
    let labels: Vec<Label> = batch.items().iter().map(|d| d.label).collect();
    kto_from_rewards(tape, &state.rewards, &labels, state.z_ref, cfg)
}

/// Mean reward minus `β` times the mean per-sequence KL between policy and
/// reference next-token distributions along each sampled output.
pub fn rlhf_objective_estimate(
    policy: &PolicyParams,
    reference: &PolicyParams,
    batch: &[(&[TokenId], &[TokenId])],
    rewards: &[f64],
    beta: f64,
) -> Result<f64, LossError> {
    check_lengths("rlhf rewards", batch.len(), rewards.len())?;
    if batch.is_empty() {
        return Err(LossError::Contract("rlhf batch is empty".into()));
    }
    if policy.vocab() != reference.vocab() {
        return Err(LossError::Contract("policy and reference vocabularies differ".into()));
    }
    finite("rlhf_objective_estimate", rewards)?;
    let mut pc = KvCache::new(policy);
    let mut rc = KvCache::new(reference);
    let mut kl_total = 0.0;
    for (x, y) in batch {
        let y = crate::policy::effective_target(y);
        if x.is_empty() || y.is_empty() {
            return Err(LossError::Contract("prompt and target must be non-empty".into()));
        }
        policy.feed_all(&mut pc, x)?;
        reference.feed_all(&mut rc, x)?;
        for (i, &t) in y.iter().enumerate() {
            let (p, q) = match (pc.last_logprobs(), rc.last_logprobs()) {
                (Some(p), Some(q)) => (p, q),
                _ => return Err(LossError::Contract("cache has no log-probs".into())),
            };
            kl_total += p.iter().zip(q).map(|(lp, lq)| lp.exp() * (lp - lq)).sum::<f64>();
            if i + 1 < y.len() {
                policy.feed(&mut pc, t)?;
                reference.feed(&mut rc, t)?;
            }
        }
    }
    let n = batch.len() as f64;
    let value = rewards.iter().sum::<f64>() / n - beta * kl_total / n;
    finite("rlhf_objective_estimate", &[value])?;
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HaloReport {
    pub monotone: bool,
    pub concave: bool,
}

/// Sampled check that `v` is non-decreasing and concave on a positive grid.
///
/// Concavity compares consecutive divided differences, so the grid need not
/// be evenly spaced.
pub fn halo_value_check<F: Fn(f64) -> f64>(v: F, grid: &[f64]) -> Result<HaloReport, LossError> {
    if grid.len() < 3 {
        return Err(LossError::Contract("grid needs at least three points".into()));
    }
    if grid.iter().any(|z| !(*z > 0.0 && z.is_finite())) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(LossError::Contract("grid must be positive and strictly increasing".into()));
    }
    let vals: Vec<f64> = grid.iter().map(|&z| v(z)).collect();
    finite("halo_value_check", &vals)?;
    let monotone = vals.windows(2).all(|w| w[1] >= w[0] - 1e-12);
    let slopes: Vec<f64> = (0..grid.len() - 1).map(|i| (vals[i + 1] - vals[i]) / (grid[i + 1] - grid[i])).collect();
    let concave = slopes.windows(2).all(|s| s[1] - s[0] <= 1e-12);
    Ok(HaloReport { monotone, concave })
}
