//! Hallucination and generation metrics for both translation directions,
//! per-pair records, and aggregate reports with fixed-bin histograms.

mod metrics;
mod nli;

pub use metrics::{bleu, chrf, delta_len, levenshtein, rouge, whitespace_tokens, LenUnit, RougeVariant};
pub use nli::{lang_win, LexicalBaseline, NliRequest, NliScorer, NliVerdict, ProcessScorer};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chem::{morgan_fingerprint, parse_smiles, tanimoto, validate_molecule};
use crate::data::Direction;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("NLI scorer: {0}")]
    Scorer(String),
}

pub const CHRF_THRESHOLD: f64 = 0.3;
pub const MAX_ABS_DELTA_LEN: i64 = 5;
pub const FP_RADIUS: usize = 2;
pub const FP_BITS: usize = 2048;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub direction: Direction,
    pub prediction: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetricRecord {
    pub id: String,
    pub direction: Direction,
    pub delta_len: i64,
    pub chrf: f64,
    pub levenshtein: usize,
    pub bleu2: Option<f64>,
    pub bleu4: Option<f64>,
    pub rouge1: Option<f64>,
    pub rouge2: Option<f64>,
    #[serde(rename = "rougeL")]
    pub rouge_l: Option<f64>,
    pub valid: Option<bool>,
    pub morgan_tanimoto: Option<f64>,
    pub nli: Option<NliVerdict>,
    pub win: bool,
}

/// Win check for generated molecules from precomputed parts.
pub fn mol_win_parts(chrf: f64, delta_len: i64, valid: bool) -> bool {
    chrf > CHRF_THRESHOLD && delta_len.abs() < MAX_ABS_DELTA_LEN && valid
}

fn smiles_valid(s: &str) -> bool {
    parse_smiles(s).is_ok_and(|g| validate_molecule(&g).is_ok())
}

fn check_reference(rec: &PairRecord) -> Result<(), EvalError> {
    if rec.reference.is_empty() {
        return Err(EvalError::Contract(format!("record {} has an empty reference", rec.id)));
    }
    Ok(())
}

pub fn mol_win(rec: &PairRecord) -> Result<bool, EvalError> {
    if rec.direction != Direction::Lang2Mol {
        return Err(EvalError::Contract(format!("mol_win on {} record {}", rec.direction, rec.id)));
    }
    check_reference(rec)?;
    let c = chrf(&rec.prediction, &rec.reference)?;
    Ok(mol_win_parts(c, delta_len(&rec.prediction, &rec.reference, LenUnit::Chars), smiles_valid(&rec.prediction)))
}

/// Tanimoto of radius-2 fingerprints; 0 when either side fails to parse.
pub fn morgan_similarity(pred: &str, reference: &str) -> f64 {
    let fp = |s: &str| parse_smiles(s).ok().and_then(|g| morgan_fingerprint(&g, FP_RADIUS, FP_BITS).ok());
    match (fp(pred), fp(reference)) {
        (Some(a), Some(b)) => tanimoto(&a, &b).unwrap_or(0.0),
        _ => 0.0,
    }
}

/// Every metric except NLI. For mol2lang records `win` stays false until a
/// verdict is attached with [`attach_nli`].
pub fn score_pair(rec: &PairRecord) -> Result<PairMetricRecord, EvalError> {
    check_reference(rec)?;
    let (pred, reference) = (rec.prediction.as_str(), rec.reference.as_str());
    let c = chrf(pred, reference)?;
    let mut out = PairMetricRecord {
        id: rec.id.clone(),
        direction: rec.direction,
        delta_len: 0,
        chrf: c,
        levenshtein: levenshtein(pred, reference),
        bleu2: None,
        bleu4: None,
        rouge1: None,
        rouge2: None,
        rouge_l: None,
        valid: None,
        morgan_tanimoto: None,
        nli: None,
        win: false,
    };
    match rec.direction {
        Direction::Lang2Mol => {
            out.delta_len = delta_len(pred, reference, LenUnit::Chars);
            let valid = smiles_valid(pred);
            out.valid = Some(valid);
            out.morgan_tanimoto = Some(morgan_similarity(pred, reference));
            out.win = mol_win_parts(c, out.delta_len, valid);
        }
        Direction::Mol2Lang => {
            out.delta_len = delta_len(pred, reference, LenUnit::Tokens);
            let p = whitespace_tokens(pred);
            let r = whitespace_tokens(reference);
            out.bleu2 = Some(bleu(&p, &r, 2)?);
            out.bleu4 = Some(bleu(&p, &r, 4)?);
            out.rouge1 = Some(rouge(&p, &r, RougeVariant::R1));
            out.rouge2 = Some(rouge(&p, &r, RougeVariant::R2));
            out.rouge_l = Some(rouge(&p, &r, RougeVariant::RL));
        }
    }
    Ok(out)
}

pub fn attach_nli(rec: &mut PairMetricRecord, verdict: NliVerdict) {
    rec.win = lang_win(&verdict);
    rec.nli = Some(verdict);
}

/// Scores every record. mol2lang records are sent to `scorer` (premise =
/// reference, hypothesis = prediction) in chunks of `max_in_flight`; records
/// the scorer fails on keep `nli: None` and count as losses.
pub fn evaluate(
    records: &[PairRecord],
    scorer: Option<&mut dyn NliScorer>,
    max_in_flight: usize,
) -> Result<Vec<PairMetricRecord>, EvalError> {
    let mut out = records.iter().map(score_pair).collect::<Result<Vec<_>, _>>()?;
    let Some(scorer) = scorer else {
        return Ok(out);
    };
    let pending: Vec<usize> = (0..records.len()).filter(|&i| records[i].direction == Direction::Mol2Lang).collect();
    for chunk in pending.chunks(max_in_flight.max(1)) {
        let requests: Vec<NliRequest> = chunk
            .iter()
            .map(|&i| NliRequest {
                id: records[i].id.clone(),
                premise: records[i].reference.clone(),
                hypothesis: records[i].prediction.clone(),
            })
            .collect();
        match scorer.score_batch(&requests) {
            Ok(verdicts) => {
                for (&i, v) in chunk.iter().zip(verdicts) {
                    match v {
                        Some(v) => attach_nli(&mut out[i], v),
                        None => log::warn!("record {} left unevaluated by the NLI scorer", records[i].id),
                    }
                }
            }
            Err(e) => log::warn!("NLI batch of {} records unevaluated: {e}", chunk.len()),
        }
    }
    Ok(out)
}

/// Fixed-width bins over `[lo, hi]`, closed on the right for the last bin,
/// plus underflow and overflow counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Self { lo, hi, counts: vec![0; bins], underflow: 0, overflow: 0 }
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn add(&mut self, v: f64) {
        if v < self.lo {
            self.underflow += 1;
        } else if v > self.hi {
            self.overflow += 1;
        } else {
            let bins = self.counts.len();
            let i = (((v - self.lo) / (self.hi - self.lo)) * bins as f64).floor() as usize;
            self.counts[i.min(bins - 1)] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    /// `bin,lower,upper,count` rows: underflow, each bin, overflow.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin,lower,upper,count\n");
        let w = self.width();
        let _ = writeln!(s, "underflow,-inf,{},{}", self.lo, self.underflow);
        for (i, c) in self.counts.iter().enumerate() {
            let lower = self.lo + w * i as f64;
            let _ = writeln!(s, "{i},{lower},{},{c}", lower + w);
        }
        let _ = writeln!(s, "overflow,{},inf,{}", self.hi, self.overflow);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// `None` when no record carries this metric.
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub count: usize,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub direction: Direction,
    pub count: usize,
    pub wins: usize,
    pub win_rate: f64,
    /// mol2lang records without an NLI verdict.
    pub nli_excluded: usize,
    pub metrics: BTreeMap<String, MetricSummary>,
}

fn histogram_for(metric: &str) -> Histogram {
    match metric {
        "delta_len" => Histogram::new(-50.0, 50.0, 100),
        "levenshtein" => Histogram::new(0.0, 50.0, 50),
        _ => Histogram::new(0.0, 1.0, 20),
    }
}

fn summarize(metric: &str, values: &[f64]) -> MetricSummary {
    let mut hist = histogram_for(metric);
    for &v in values {
        hist.add(v);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let (mean, median) = if n == 0 {
        (None, None)
    } else {
        let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
        (Some(values.iter().sum::<f64>() / n as f64), Some(median))
    };
    MetricSummary { mean, median, count: n, histogram: hist }
}

fn metric_values(rec: &PairMetricRecord) -> Vec<(&'static str, Option<f64>)> {
    let mut v = vec![
        ("delta_len", Some(rec.delta_len as f64)),
        ("chrf", Some(rec.chrf)),
        ("levenshtein", Some(rec.levenshtein as f64)),
    ];
    match rec.direction {
        Direction::Lang2Mol => {
            v.push(("valid", rec.valid.map(|b| f64::from(u8::from(b)))));
            v.push(("morgan_tanimoto", rec.morgan_tanimoto));
        }
        Direction::Mol2Lang => {
            v.extend([
                ("bleu2", rec.bleu2),
                ("bleu4", rec.bleu4),
                ("rouge1", rec.rouge1),
                ("rouge2", rec.rouge2),
                ("rougeL", rec.rouge_l),
                ("nli_entail", rec.nli.map(|n| n.p_entail)),
            ]);
        }
    }
    v
}

/// Means, medians and histograms per metric. Metrics a record lacks (an
/// unevaluated NLI verdict) are left out of that metric's summary only.
pub fn aggregate_report(records: &[PairMetricRecord]) -> Result<MetricReport, EvalError> {
    let first = records.first().ok_or_else(|| EvalError::Contract("cannot aggregate zero records".into()))?;
    let direction = first.direction;
    if let Some(r) = records.iter().find(|r| r.direction != direction) {
        return Err(EvalError::Contract(format!("mixed directions: {} and {} ({})", direction, r.direction, r.id)));
    }
    let mut columns: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for rec in records {
        for (name, v) in metric_values(rec) {
            let col = columns.entry(name).or_default();
            if let Some(v) = v {
                col.push(v);
            }
        }
    }
    let wins = records.iter().filter(|r| r.win).count();
    let nli_excluded =
        if direction == Direction::Mol2Lang { records.iter().filter(|r| r.nli.is_none()).count() } else { 0 };
    Ok(MetricReport {
        direction,
        count: records.len(),
        wins,
        win_rate: wins as f64 / records.len() as f64,
        nli_excluded,
        metrics: columns.into_iter().map(|(k, v)| (k.to_string(), summarize(k, &v))).collect(),
    })
}

#[cfg(test)]
mod tests;
