//! Record formats, instruction rendering, the toy corpus, corruption-based
//! preference triples, and dataset splits.

mod template;
mod toy;

pub use template::{prompt_for, render_instruction, shared_prefix, template, InstructionTemplate, RESPONSE_MARKER};
pub use toy::{corrupt_target, gen_toy_corpus, toy_molecules, Group, ToyMolecule, MAX_CARBONS};

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::losses::Label;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("injectivity violation: {0}")]
    Injectivity(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Lang2Mol,
    Mol2Lang,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::Lang2Mol, Direction::Mol2Lang];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lang2Mol => "lang2mol",
            Self::Mol2Lang => "mol2lang",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lang2mol" => Ok(Self::Lang2Mol),
            "mol2lang" => Ok(Self::Mol2Lang),
            other => Err(DataError::Contract(format!("unknown direction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmPair {
    pub id: String,
    pub direction: Direction,
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub id: String,
    pub direction: Direction,
    pub source: String,
    pub preferred: String,
    pub dispreferred: String,
}

impl PreferenceTriple {
    pub fn is_degenerate(&self) -> bool {
        self.preferred == self.dispreferred
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KtoExample {
    pub id: String,
    pub direction: Direction,
    pub source: String,
    pub output: String,
    pub label: Label,
}

/// Record types that carry their own invariants.
pub trait Record: Serialize + DeserializeOwned {
    fn check(&self) -> Result<(), String>;
}

impl Record for LmPair {
    fn check(&self) -> Result<(), String> {
        if self.source.is_empty() || self.target.is_empty() {
            return Err(format!("pair {} has an empty source or target", self.id));
        }
        Ok(())
    }
}

impl Record for PreferenceTriple {
    fn check(&self) -> Result<(), String> {
        if self.source.is_empty() || self.preferred.is_empty() || self.dispreferred.is_empty() {
            return Err(format!("triple {} has an empty field", self.id));
        }
        Ok(())
    }
}

impl Record for KtoExample {
    fn check(&self) -> Result<(), String> {
        if self.source.is_empty() || self.output.is_empty() {
            return Err(format!("example {} has an empty source or output", self.id));
        }
        Ok(())
    }
}

impl Record for crate::eval::PairRecord {
    fn check(&self) -> Result<(), String> {
        if self.reference.is_empty() {
            return Err(format!("record {} has an empty reference", self.id));
        }
        Ok(())
    }
}

impl Record for crate::eval::PairMetricRecord {
    fn check(&self) -> Result<(), String> {
        Ok(())
    }
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}

/// Parses JSONL text; blank lines are skipped. `origin` names the source in
/// errors.
pub fn parse_jsonl<T: Record>(text: &str, origin: &str) -> Result<Vec<T>, DataError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| DataError::Parse { path: origin.to_string(), line: i + 1, message };
        let rec: T = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        rec.check().map_err(err)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_jsonl<T: Record>(path: &Path) -> Result<Vec<T>, DataError> {
    let f = fs::File::open(path).map_err(|e| io_err(path, &e))?;
    let mut text = String::new();
    for line in BufReader::new(f).lines() {
        text.push_str(&line.map_err(|e| io_err(path, &e))?);
        text.push('\n');
    }
    parse_jsonl(&text, &path.display().to_string())
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DataError> {
    write_atomic(path, to_jsonl(records).as_bytes())
}

fn io_err(path: &Path, e: &std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    let mut f = fs::File::create(tmp).map_err(|e| io_err(tmp, &e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| io_err(tmp, &e))?;
    fs::rename(tmp, path).map_err(|e| io_err(path, &e))
}

/// Produces a dispreferred output for a pair.
pub trait TargetGenerator {
    fn generate(&mut self, pair: &LmPair) -> Result<String, DataError>;
}

/// Returns the gold target unchanged; every triple comes out degenerate.
pub struct IdentityGenerator;

impl TargetGenerator for IdentityGenerator {
    fn generate(&mut self, pair: &LmPair) -> Result<String, DataError> {
        Ok(pair.target.clone())
    }
}

/// Corrupts the gold target, drawing one seed per pair from a master stream.
pub struct CorruptionGenerator {
    pub strength: f64,
    rng: ChaCha8Rng,
}

impl CorruptionGenerator {
    pub fn new(strength: f64, seed: u64) -> Self {
        Self { strength, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl TargetGenerator for CorruptionGenerator {
    fn generate(&mut self, pair: &LmPair) -> Result<String, DataError> {
        let seed = self.rng.gen();
        corrupt_target(&pair.target, pair.direction, self.strength, seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripleBuild {
    pub triples: Vec<PreferenceTriple>,
    pub skipped: usize,
    pub degenerate: usize,
}

/// One triple per pair with the gold target preferred. Pairs the generator
/// fails on, or answers with an empty string, are skipped and counted.
pub fn build_triples(pairs: &[LmPair], generator: &mut dyn TargetGenerator) -> TripleBuild {
    let mut triples = Vec::with_capacity(pairs.len());
    let mut skipped = 0;
    for p in pairs {
        match generator.generate(p) {
            Ok(y) if !y.is_empty() => triples.push(PreferenceTriple {
                id: p.id.clone(),
                direction: p.direction,
                source: p.source.clone(),
                preferred: p.target.clone(),
                dispreferred: y,
            }),
            Ok(_) => skipped += 1,
            Err(e) => {
                log::warn!("skipping {}: {e}", p.id);
                skipped += 1;
            }
        }
    }
    if skipped > 0 {
        log::warn!("generator failed on {skipped} of {} pairs", pairs.len());
    }
    let degenerate = triples.iter().filter(|t| t.is_degenerate()).count();
    TripleBuild { triples, skipped, degenerate }
}

/// Two labelled examples per triple, ids suffixed `#preferred` and
/// `#dispreferred`.
pub fn triples_to_kto(triples: &[PreferenceTriple]) -> Vec<KtoExample> {
    triples
        .iter()
        .flat_map(|t| {
            [(Label::Preferred, &t.preferred, "preferred"), (Label::Dispreferred, &t.dispreferred, "dispreferred")].map(
                |(label, output, suffix)| KtoExample {
                    id: format!("{}#{suffix}", t.id),
                    direction: t.direction,
                    source: t.source.clone(),
                    output: output.clone(),
                    label,
                },
            )
        })
        .collect()
}

/// Shuffles with `seed`, then cuts train/val by rounded fractions; test takes
/// the remainder.
pub fn split_dataset<T: Clone>(items: &[T], fractions: [f64; 3], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>), DataError> {
    if fractions.iter().any(|f| !(*f > 0.0 && f.is_finite())) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::Contract(format!("split fractions must be positive and sum to 1, got {fractions:?}")));
    }
    let n = items.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    Ok((pick(&idx[..n_train]), pick(&idx[n_train..n_train + n_val]), pick(&idx[n_train + n_val..])))
}
