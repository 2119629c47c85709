use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, Direction, LmPair};
use crate::chem::tokenize_smiles;

pub const MAX_CARBONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Hydroxyl,
    Amino,
    Carboxyl,
}

impl Group {
    fn name(self) -> &'static str {
        match self {
            Self::Hydroxyl => "hydroxyl",
            Self::Amino => "amino",
            Self::Carboxyl => "carboxyl",
        }
    }

    fn smiles(self) -> &'static str {
        match self {
            Self::Hydroxyl => "O",
            Self::Amino => "N",
            Self::Carboxyl => "(=O)O",
        }
    }
}

/// One molecule of the toy grammar: a carbon chain, an optional methyl
/// branch on an inner carbon, and an optional group on the last carbon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ToyMolecule {
    pub carbons: usize,
    /// 1-based chain position, in `2..carbons`.
    pub branch: Option<usize>,
    pub group: Option<Group>,
}

impl ToyMolecule {
    pub fn smiles(&self) -> String {
        let mut s = String::new();
        match self.branch {
            Some(k) => {
                s.push_str(&"C".repeat(k));
                s.push_str("(C)");
                s.push_str(&"C".repeat(self.carbons - k));
            }
            None => s.push_str(&"C".repeat(self.carbons)),
        }
        if let Some(g) = self.group {
            s.push_str(g.smiles());
        }
        s
    }

    pub fn caption(&self) -> String {
        let unit = if self.carbons == 1 { "carbon" } else { "carbons" };
        let mut s = format!("a chain of {} {unit}", self.carbons);
        if let Some(k) = self.branch {
            s.push_str(&format!(" with a methyl branch at carbon {k}"));
        }
        if let Some(g) = self.group {
            s.push_str(&format!(" bearing one {} group", g.name()));
        }
        s
    }
}

/// Every molecule of the grammar in a fixed order.
pub fn toy_molecules() -> Vec<ToyMolecule> {
    let mut out = Vec::new();
    for carbons in 1..=MAX_CARBONS {
        let branches = std::iter::once(None).chain((2..carbons).map(Some));
        for branch in branches {
            for group in [None, Some(Group::Hydroxyl), Some(Group::Amino), Some(Group::Carboxyl)] {
                out.push(ToyMolecule { carbons, branch, group });
            }
        }
    }
    out
}

/// `n` pairs with ids `pair-000001..`, alternating lang2mol and mol2lang,
/// each drawing a molecule uniformly from the grammar.
pub fn gen_toy_corpus(n: usize, seed: u64) -> Result<Vec<LmPair>, DataError> {
    if n < 1 {
        return Err(DataError::Contract("toy corpus size must be at least 1".into()));
    }
    let mols = toy_molecules();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| {
            let m = mols.choose(&mut rng).expect("grammar is non-empty");
            let direction = if i % 2 == 0 { Direction::Lang2Mol } else { Direction::Mol2Lang };
            let (source, target) = match direction {
                Direction::Lang2Mol => (m.caption(), m.smiles()),
                Direction::Mol2Lang => (m.smiles(), m.caption()),
            };
            LmPair { id: format!("pair-{:06}", i + 1), direction, source, target }
        })
        .collect())
}

const SMILES_ALPHABET: [&str; 6] = ["C", "N", "O", "(", ")", "="];
const CAPTION_WORDS: [&str; 25] = [
    "a", "chain", "of", "carbon", "carbons", "with", "methyl", "branch", "at", "bearing", "one", "hydroxyl", "amino",
    "carboxyl", "group", "1", "2", "3", "4", "5", "6", "7", "8", "9", "10",
];

/// Splits a target into editable units: SMILES tokens for molecules, words
/// for captions. Units are joined back with the returned separator.
fn units(target: &str, direction: Direction) -> (Vec<String>, &'static str) {
    match direction {
        Direction::Lang2Mol => match tokenize_smiles(target) {
            Ok(toks) => {
                let chars: Vec<char> = target.chars().collect();
                (toks.iter().map(|t| chars[t.start..t.end].iter().collect()).collect(), "")
            }
            Err(_) => (target.chars().map(String::from).collect(), ""),
        },
        Direction::Mol2Lang => (target.split_whitespace().map(String::from).collect(), " "),
    }
}

/// Applies at least one edit (substitution from the direction's alphabet,
/// truncation, or duplication) and always returns something different from
/// `target`. The edit count grows with `strength` and target length.
pub fn corrupt_target(target: &str, direction: Direction, strength: f64, seed: u64) -> Result<String, DataError> {
    if !(strength > 0.0 && strength <= 1.0) {
        return Err(DataError::Contract(format!("corruption strength must be in (0, 1], got {strength}")));
    }
    let (mut u, sep) = units(target, direction);
    if u.is_empty() {
        return Err(DataError::Contract("cannot corrupt an empty target".into()));
    }
    let alphabet: &[&str] = match direction {
        Direction::Lang2Mol => &SMILES_ALPHABET,
        Direction::Mol2Lang => &CAPTION_WORDS,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edits = ((strength * u.len() as f64 / 4.0).round() as usize).max(1);
    for _ in 0..edits {
        match rng.gen_range(0..3) {
            0 if u.len() > 1 => {
                let keep = rng.gen_range(1..u.len());
                u.truncate(keep);
            }
            1 => {
                let i = rng.gen_range(0..u.len());
                let copy = u[i].clone();
                u.insert(i, copy);
            }
            _ => {
                let i = rng.gen_range(0..u.len());
                let choices: Vec<&&str> = alphabet.iter().filter(|&&a| a != u[i]).collect();
                u[i] = choices.choose(&mut rng).expect("alphabet has alternatives").to_string();
            }
        }
    }
    let out = u.join(sep);
    if out != target {
        return Ok(out);
    }
    // Edits can cancel out; a duplication of the first unit never does.
    let (u, sep) = units(target, direction);
    Ok(format!("{}{sep}{}", u[0], u.join(sep)))
}
