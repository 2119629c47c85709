//! Deterministic training loops for the four objectives, plus batched
//! scoring and greedy translation helpers used by evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{prompt_for, DataError, Direction, KtoExample, LmPair, PreferenceTriple};
use crate::losses::{
    cpo_from_logps, dpo_from_logps, kto_from_rewards, kto_rewards, reference_logps, sft_from_logps, zref_from_logps,
    BatchTriples, Label, LossConfig, LossError, Triple,
};
use crate::numerics::{clip_global_norm, AdamConfig, NumericsError, OptimizerState, Tape};
use crate::policy::{greedy_decode_cached, KvCache, PolicyError, PolicyGraph, PolicyParams, TokenId, Vocab};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(LossError),
    #[error(transparent)]
    Policy(PolicyError),
}

fn is_non_finite(e: &NumericsError) -> bool {
    matches!(e, NumericsError::NonFinite { .. })
}

impl From<LossError> for TrainError {
    fn from(e: LossError) -> Self {
        match e {
            LossError::Policy(p) => p.into(),
            LossError::Numerics(n) if is_non_finite(&n) => Self::Diverged { step: 0, detail: n.to_string() },
            other => Self::Loss(other),
        }
    }
}

impl From<PolicyError> for TrainError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Numerics(n) if is_non_finite(&n) => Self::Diverged { step: 0, detail: n.to_string() },
            other => Self::Policy(other),
        }
    }
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        PolicyError::Numerics(e).into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sft,
    Dpo,
    Cpo,
    Kto,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sft => "sft",
            Self::Dpo => "dpo",
            Self::Cpo => "cpo",
            Self::Kto => "kto",
        }
    }

    pub fn needs_reference(self) -> bool {
        matches!(self, Self::Dpo | Self::Kto)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sft" => Ok(Self::Sft),
            "dpo" => Ok(Self::Dpo),
            "cpo" => Ok(Self::Cpo),
            "kto" => Ok(Self::Kto),
            other => Err(TrainError::Config(format!("unknown method {other:?} (expected sft, dpo, cpo or kto)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub loss: LossConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
}

impl TrainConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        Self { method, loss: LossConfig::default(), lr: 3e-3, epochs: 1, batch_size: 16, seed, clip_norm: 1.0 }
    }

    /// Checks knobs and the reference rule: dpo and kto need a frozen
    /// reference, sft and cpo must not get one.
    pub fn validate(&self, has_reference: bool) -> Result<(), TrainError> {
        self.loss.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch size must be positive".into()));
        }
        if self.method == Method::Kto && self.batch_size < 2 {
            return Err(TrainError::Config("kto needs batches of at least 2 examples".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(TrainError::Config(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        match (self.method.needs_reference(), has_reference) {
            (true, false) => Err(TrainError::Config(format!("{} requires a reference checkpoint (--ref)", self.method))),
            (false, true) if self.method == Method::Cpo => {
                Err(TrainError::Config("cpo is reference-free; do not pass a reference checkpoint".into()))
            }
            (false, true) => Err(TrainError::Config(format!("{} does not use a reference checkpoint", self.method))),
            _ => Ok(()),
        }
    }
}

/// `[BOS] ++ prompt` and `target ++ [EOS]` for one example.
pub fn encode_example(vocab: &Vocab, direction: Direction, source: &str, target: &str) -> Result<(Vec<TokenId>, Vec<TokenId>), TrainError> {
    let x = vocab.encode_prompt(&prompt_for(direction, source)?)?;
    let y = vocab.encode_target(target)?;
    Ok((x, y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftItem {
    pub direction: Direction,
    pub x: Vec<TokenId>,
    pub y: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefItem {
    pub direction: Direction,
    pub x: Vec<TokenId>,
    pub y_w: Vec<TokenId>,
    pub y_l: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KtoItem {
    pub direction: Direction,
    pub x: Vec<TokenId>,
    pub y: Vec<TokenId>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainSet {
    Sft(Vec<SftItem>),
    Pref(Vec<PrefItem>),
    Kto(Vec<KtoItem>),
}

impl TrainSet {
    pub fn from_pairs(vocab: &Vocab, pairs: &[LmPair]) -> Result<Self, TrainError> {
        pairs
            .iter()
            .map(|p| {
                let (x, y) = encode_example(vocab, p.direction, &p.source, &p.target)?;
                Ok(SftItem { direction: p.direction, x, y })
            })
            .collect::<Result<_, _>>()
            .map(Self::Sft)
    }

    pub fn from_triples(vocab: &Vocab, triples: &[PreferenceTriple]) -> Result<Self, TrainError> {
        triples
            .iter()
            .map(|t| {
                let (x, y_w) = encode_example(vocab, t.direction, &t.source, &t.preferred)?;
                let y_l = vocab.encode_target(&t.dispreferred)?;
                Ok(PrefItem { direction: t.direction, x, y_w, y_l })
            })
            .collect::<Result<_, _>>()
            .map(Self::Pref)
    }

    /// SFT on the preferred side of each triple.
    pub fn sft_from_triples(vocab: &Vocab, triples: &[PreferenceTriple]) -> Result<Self, TrainError> {
        triples
            .iter()
            .map(|t| {
                let (x, y) = encode_example(vocab, t.direction, &t.source, &t.preferred)?;
                Ok(SftItem { direction: t.direction, x, y })
            })
            .collect::<Result<_, _>>()
            .map(Self::Sft)
    }

    pub fn from_kto(vocab: &Vocab, examples: &[KtoExample]) -> Result<Self, TrainError> {
        examples
            .iter()
            .map(|k| {
                let (x, y) = encode_example(vocab, k.direction, &k.source, &k.output)?;
                Ok(KtoItem { direction: k.direction, x, y, label: k.label })
            })
            .collect::<Result<_, _>>()
            .map(Self::Kto)
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Sft(v) => v.len(),
            Self::Pref(v) => v.len(),
            Self::Kto(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn direction(&self, i: usize) -> Direction {
        match self {
            Self::Sft(v) => v[i].direction,
            Self::Pref(v) => v[i].direction,
            Self::Kto(v) => v[i].direction,
        }
    }

    fn check_method(&self, method: Method) -> Result<(), TrainError> {
        let ok = matches!(
            (self, method),
            (Self::Sft(_), Method::Sft) | (Self::Pref(_), Method::Dpo | Method::Cpo) | (Self::Kto(_), Method::Kto)
        );
        if !ok {
            let kind = match self {
                Self::Sft(_) => "pairs",
                Self::Pref(_) => "triples",
                Self::Kto(_) => "kto examples",
            };
            return Err(TrainError::Config(format!("{method} cannot train on {kind}")));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub components: BTreeMap<String, f64>,
}

/// Single-direction batches: indices are shuffled, split by direction,
/// chunked, and the chunks shuffled again. Sharing a direction lets every
/// batch share its instruction prefix.
fn epoch_batches(set: &TrainSet, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.shuffle(rng);
    let mut batches = Vec::new();
    for d in Direction::ALL {
        let of_d: Vec<usize> = idx.iter().copied().filter(|&i| set.direction(i) == d).collect();
        batches.extend(of_d.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Sequence log-likelihoods under `params`, scored in single-direction
/// chunks so each chunk shares its instruction prefix.
pub fn score_sequences(
    params: &PolicyParams,
    items: &[(Direction, &[TokenId], &[TokenId])],
    chunk: usize,
) -> Result<Vec<f64>, TrainError> {
    let mut out = vec![0.0; items.len()];
    for d in Direction::ALL {
        let idx: Vec<usize> = (0..items.len()).filter(|&i| items[i].0 == d).collect();
        for c in idx.chunks(chunk.max(1)) {
            let pairs: Vec<(&[TokenId], &[TokenId])> = c.iter().map(|&i| (items[i].1, items[i].2)).collect();
            for (&i, lp) in c.iter().zip(reference_logps(params, &pairs)?) {
                out[i] = lp;
            }
        }
    }
    Ok(out)
}

/// Mean of `log π(y_w|x) − log π(y_l|x)` over preference items.
pub fn preference_margin(params: &PolicyParams, items: &[PrefItem]) -> Result<f64, TrainError> {
    if items.is_empty() {
        return Err(TrainError::Config("preference margin over zero items".into()));
    }
    let mut seqs = Vec::with_capacity(2 * items.len());
    for it in items {
        seqs.push((it.direction, it.x.as_slice(), it.y_w.as_slice()));
    }
    for it in items {
        seqs.push((it.direction, it.x.as_slice(), it.y_l.as_slice()));
    }
    let lps = score_sequences(params, &seqs, 32)?;
    let (w, l) = lps.split_at(items.len());
    Ok(w.iter().zip(l).map(|(a, b)| a - b).sum::<f64>() / items.len() as f64)
}

const SCORE_CHUNK: usize = 32;

/// Runs `cfg.epochs` passes over `data` starting from `init`. `log` receives
/// one record per optimizer step.
pub fn train(
    init: &PolicyParams,
    reference: Option<&PolicyParams>,
    data: &TrainSet,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<PolicyParams, TrainError> {
    cfg.validate(reference.is_some())?;
    data.check_method(cfg.method)?;
    if data.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    if let Some(r) = reference {
        if !same_shape(r, init) {
            return Err(TrainError::Config("reference and initial checkpoints have different architectures".into()));
        }
    }

    // Frozen reference log-probs, computed once.
    let ref_lps: Vec<(f64, f64)> = match (data, reference, cfg.method) {
        (TrainSet::Pref(items), Some(r), Method::Dpo) => {
            let mut seqs = Vec::with_capacity(2 * items.len());
            seqs.extend(items.iter().map(|it| (it.direction, it.x.as_slice(), it.y_w.as_slice())));
            seqs.extend(items.iter().map(|it| (it.direction, it.x.as_slice(), it.y_l.as_slice())));
            let lps = score_sequences(r, &seqs, SCORE_CHUNK)?;
            let (w, l) = lps.split_at(items.len());
            w.iter().copied().zip(l.iter().copied()).collect()
        }
        (TrainSet::Kto(items), Some(r), Method::Kto) => {
            let seqs: Vec<_> = items.iter().map(|it| (it.direction, it.x.as_slice(), it.y.as_slice())).collect();
            score_sequences(r, &seqs, SCORE_CHUNK)?.into_iter().map(|v| (v, 0.0)).collect()
        }
        _ => Vec::new(),
    };

    let mut params = init.clone();
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut opt = OptimizerState::new(adam, params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tape = Tape::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(data, cfg.batch_size, &mut rng) {
            if cfg.method == Method::Kto && batch.len() < 2 {
                // z_ref needs a mismatched partner.
                continue;
            }
            step += 1;
            let at_step = |e: TrainError| match e {
                TrainError::Diverged { detail, .. } => TrainError::Diverged { step, detail },
                other => other,
            };
            tape.reset();
            let graph = PolicyGraph::register(&mut tape, &params, true).map_err(|e| at_step(e.into()))?;
            let (loss, components) =
                step_loss(&mut tape, &graph, &params, reference, data, &batch, &ref_lps, cfg).map_err(at_step)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(TrainError::Diverged { step, detail: format!("loss is {value}") });
            }
            let mut grads = tape.backward(loss).map_err(|e| at_step(e.into()))?;
            let mut g: Vec<_> = graph.vars().iter().map(|&v| grads.take(v)).collect();
            if g.iter().any(|t| t.data().iter().any(|x| !x.is_finite())) {
                return Err(TrainError::Diverged { step, detail: "non-finite gradient".into() });
            }
            clip_global_norm(&mut g, cfg.clip_norm);
            opt.adam_step(params.tensors_mut(), &g).map_err(|e| at_step(e.into()))?;
            log(&LogRecord { step, epoch: epoch + 1, loss: value, components });
        }
    }
    Ok(params)
}

fn same_shape(a: &PolicyParams, b: &PolicyParams) -> bool {
    a.config().param_specs() == b.config().param_specs() && a.config().vocab == b.config().vocab
}

#[allow(clippy::too_many_arguments)]
fn step_loss(
    tape: &mut Tape,
    graph: &PolicyGraph,
    params: &PolicyParams,
    reference: Option<&PolicyParams>,
    data: &TrainSet,
    batch: &[usize],
    ref_lps: &[(f64, f64)],
    cfg: &TrainConfig,
) -> Result<(crate::numerics::Var, BTreeMap<String, f64>), TrainError> {
    let mut components = BTreeMap::new();
    let loss = match data {
        TrainSet::Sft(items) => {
            let pairs: Vec<(&[TokenId], &[TokenId])> =
                batch.iter().map(|&i| (items[i].x.as_slice(), items[i].y.as_slice())).collect();
            let lps = graph.sequence_logprobs(tape, &pairs)?;
            sft_from_logps(tape, &lps)?
        }
        TrainSet::Pref(items) => {
            let triples = BatchTriples::new(
                batch
                    .iter()
                    .map(|&i| Triple { x: items[i].x.clone(), y_w: items[i].y_w.clone(), y_l: items[i].y_l.clone() })
                    .collect(),
            )?;
            let (w, l) = crate::losses::triple_logps(tape, graph, &triples)?;
            let margin = w.iter().zip(&l).map(|(&a, &b)| tape.scalar(a) - tape.scalar(b)).sum::<f64>() / w.len() as f64;
            components.insert("margin".into(), margin);
            if cfg.method == Method::Cpo {
                let terms = cpo_from_logps(tape, &w, &l, cfg.loss.beta)?;
                components.insert("prefer".into(), tape.scalar(terms.prefer));
                components.insert("nll".into(), tape.scalar(terms.nll));
                terms.total
            } else {
                let refs: Vec<(f64, f64)> = batch.iter().map(|&i| ref_lps[i]).collect();
                dpo_from_logps(tape, &w, &l, &refs, cfg.loss.beta)?
            }
        }
        TrainSet::Kto(items) => {
            let reference = reference.ok_or_else(|| TrainError::Config("kto requires a reference checkpoint".into()))?;
            let n = batch.len();
            let mismatched: Vec<(&[TokenId], &[TokenId])> =
                (0..n).map(|j| (items[batch[j]].x.as_slice(), items[batch[(j + 1) % n]].y.as_slice())).collect();
            let z_ref = zref_from_logps(
                &reference_logps(params, &mismatched)?,
                &reference_logps(reference, &mismatched)?,
                cfg.loss.beta,
            )?;
            components.insert("z_ref".into(), z_ref);
            let pairs: Vec<(&[TokenId], &[TokenId])> =
                batch.iter().map(|&i| (items[i].x.as_slice(), items[i].y.as_slice())).collect();
            let lps = graph.sequence_logprobs(tape, &pairs)?;
            let refs: Vec<f64> = batch.iter().map(|&i| ref_lps[i].0).collect();
            let rewards = kto_rewards(tape, &lps, &refs, cfg.loss.beta)?;
            let labels: Vec<Label> = batch.iter().map(|&i| items[i].label).collect();
            kto_from_rewards(tape, &rewards, &labels, z_ref, &cfg.loss)?
        }
    };
    Ok((loss, components))
}

/// Greedy translations of `sources`, one KV cache per direction so that
/// consecutive prompts reuse their shared instruction prefix. Characters the
/// vocabulary lacks make that source fail.
pub fn translate_all(
    params: &PolicyParams,
    sources: &[(Direction, &str)],
    max_len: usize,
) -> Result<Vec<String>, TrainError> {
    let vocab = params.vocab();
    let mut caches: BTreeMap<Direction, KvCache> = BTreeMap::new();
    let mut out = Vec::with_capacity(sources.len());
    for &(d, src) in sources {
        let x = vocab.encode_prompt(&prompt_for(d, src)?)?;
        let cache = caches.entry(d).or_insert_with(|| KvCache::new(params));
        let room = params.config().context.saturating_sub(x.len());
        let ids = greedy_decode_cached(params, cache, &x, max_len.min(room))?;
        out.push(vocab.decode(&ids));
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
