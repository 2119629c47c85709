//! SMILES tokenization and parsing, a valence-based validity check, and
//! Morgan-style circular fingerprints with Tanimoto similarity.

mod fingerprint;
mod tokenize;

pub use fingerprint::{morgan_fingerprint, tanimoto, Fingerprint};
pub use tokenize::{tokenize_smiles, AtomSpec, BondSymbol, SmilesToken, TokenKind};

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChemError {
    #[error("unrecognized SMILES input {ch:?} at offset {offset}")]
    Tokenize { offset: usize, ch: Option<char> },
    #[error("empty SMILES string")]
    Empty,
    #[error("unmatched '(' opened at offset {offset}")]
    UnclosedBranch { offset: usize },
    #[error("unmatched ')' at offset {offset}")]
    UnopenedBranch { offset: usize },
    #[error("empty branch at offset {offset}")]
    EmptyBranch { offset: usize },
    #[error("branch opened at offset {offset} does not start with an atom")]
    BranchWithoutAtom { offset: usize },
    #[error("ring closure {digit} is never closed")]
    UnclosedRing { digit: u32 },
    #[error("bond or ring closure at offset {offset} has no atom to attach to")]
    MissingAtom { offset: usize },
    #[error("ring closure {digit} has conflicting bond orders")]
    ConflictingRingBond { digit: u32 },
    #[error("ring closure {digit} bonds an atom to itself")]
    SelfLoop { digit: u32 },
    #[error("ring closure {digit} duplicates an existing bond")]
    DuplicateBond { digit: u32 },
    #[error("contract violation: {0}")]
    Contract(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Valence contribution in half-bonds (aromatic counts 1.5).
    fn halves(self) -> u32 {
        match self {
            Self::Single => 2,
            Self::Double => 4,
            Self::Triple => 6,
            Self::Aromatic => 3,
        }
    }

    pub(crate) fn code(self) -> u64 {
        match self {
            Self::Single => 1,
            Self::Double => 2,
            Self::Triple => 3,
            Self::Aromatic => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atom {
    pub element: String,
    pub aromatic: bool,
    pub charge: i32,
    /// Hydrogens written in a bracket atom; `None` means implicit.
    pub explicit_h: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MolGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
    pub fragments: usize,
}

/// Conventional maximum valence of the uncharged element, where one is
/// tabulated.
fn base_valence(element: &str) -> Option<u32> {
    Some(match element {
        "B" => 3,
        "C" => 4,
        "N" => 3,
        "O" => 2,
        "P" => 5,
        "S" => 6,
        "F" | "Cl" | "Br" | "I" => 1,
        _ => return None,
    })
}

/// Maximum valence after the charge adjustment: carbon loses one per unit
/// of charge either way, boron gains with negative charge, the rest gain
/// with positive charge.
pub fn max_valence(element: &str, charge: i32) -> Option<u32> {
    let base = base_valence(element)? as i32;
    let v = match element {
        "C" => base - charge.abs(),
        "B" => base - charge,
        _ => base + charge,
    };
    Some(v.max(0) as u32)
}

/// Lowest standard valences used to infer implicit hydrogens.
fn default_valences(element: &str) -> &'static [u32] {
    match element {
        "B" => &[3],
        "C" => &[4],
        "N" => &[3, 5],
        "O" => &[2],
        "P" => &[3, 5],
        "S" => &[2, 4, 6],
        "F" | "Cl" | "Br" | "I" => &[1],
        _ => &[],
    }
}

impl MolGraph {
    pub fn degree(&self, atom: usize) -> usize {
        self.bonds.iter().filter(|b| b.a == atom || b.b == atom).count()
    }

    /// Bond-order sum with aromatic bonds counted 1.5, rounded up.
    pub fn bond_order_sum(&self, atom: usize) -> u32 {
        let halves: u32 = self.bonds.iter().filter(|b| b.a == atom || b.b == atom).map(|b| b.order.halves()).sum();
        halves.div_ceil(2)
    }

    /// Explicit hydrogens, or for organic-subset atoms the hydrogens needed to
    /// reach the lowest standard valence not below the bond-order sum.
    pub fn hydrogens(&self, atom: usize) -> u32 {
        let a = &self.atoms[atom];
        if let Some(h) = a.explicit_h {
            return h;
        }
        let used = self.bond_order_sum(atom);
        default_valences(&a.element)
            .iter()
            .find(|&&v| v >= used)
            .map_or(0, |v| v - used)
    }

    pub fn neighbors(&self, atom: usize) -> impl Iterator<Item = (usize, BondOrder)> + '_ {
        self.bonds.iter().filter_map(move |b| {
            if b.a == atom {
                Some((b.b, b.order))
            } else if b.b == atom {
                Some((b.a, b.order))
            } else {
                None
            }
        })
    }
}

fn default_bond(g: &MolGraph, a: usize, b: usize) -> BondOrder {
    if g.atoms[a].aromatic && g.atoms[b].aromatic {
        BondOrder::Aromatic
    } else {
        BondOrder::Single
    }
}

fn has_bond(g: &MolGraph, a: usize, b: usize) -> bool {
    g.bonds.iter().any(|x| (x.a == a && x.b == b) || (x.a == b && x.b == a))
}

/// Parses SMILES into a molecular graph, resolving branches and ring
/// closures.
pub fn parse_smiles(s: &str) -> Result<MolGraph, ChemError> {
    let tokens = tokenize_smiles(s)?;
    if tokens.is_empty() {
        return Err(ChemError::Empty);
    }
    let mut g = MolGraph { atoms: Vec::new(), bonds: Vec::new(), fragments: 1 };
    let mut prev: Option<usize> = None;
    let mut pending: Option<(BondOrder, usize)> = None;
    // (atom before the branch, offset of '(', atoms when opened)
    let mut branches: Vec<(usize, usize, usize)> = Vec::new();
    let mut rings: BTreeMap<u32, (usize, Option<BondOrder>)> = BTreeMap::new();
    // Offset of a '(' still waiting for its first atom.
    let mut fresh_branch: Option<usize> = None;

    for tok in &tokens {
        if let Some(open) = fresh_branch {
            match tok.kind {
                TokenKind::BranchOpen | TokenKind::RingClosure(_) | TokenKind::Dot => {
                    return Err(ChemError::BranchWithoutAtom { offset: open })
                }
                _ => {}
            }
        }
        match &tok.kind {
            TokenKind::Atom(spec) | TokenKind::BracketAtom(spec) => {
                let idx = g.atoms.len();
                g.atoms.push(Atom {
                    element: spec.element.clone(),
                    aromatic: spec.aromatic,
                    charge: spec.charge,
                    explicit_h: spec.hydrogens,
                });
                fresh_branch = None;
                if let Some(p) = prev {
                    let order = pending.take().map_or_else(|| default_bond(&g, p, idx), |(o, _)| o);
                    g.bonds.push(Bond { a: p, b: idx, order });
                } else if let Some((_, at)) = pending {
                    return Err(ChemError::MissingAtom { offset: at });
                }
                prev = Some(idx);
            }
            TokenKind::Bond(sym) => {
                if prev.is_none() || pending.is_some() {
                    return Err(ChemError::MissingAtom { offset: tok.start });
                }
                pending = Some((sym.order(), tok.start));
            }
            TokenKind::BranchOpen => {
                let p = prev.ok_or(ChemError::MissingAtom { offset: tok.start })?;
                if let Some((_, at)) = pending {
                    return Err(ChemError::MissingAtom { offset: at });
                }
                branches.push((p, tok.start, g.atoms.len()));
                fresh_branch = Some(tok.start);
            }
            TokenKind::BranchClose => {
                let (p, open, atoms_then) = branches.pop().ok_or(ChemError::UnopenedBranch { offset: tok.start })?;
                if let Some((_, at)) = pending {
                    return Err(ChemError::MissingAtom { offset: at });
                }
                if g.atoms.len() == atoms_then {
                    return Err(ChemError::EmptyBranch { offset: open });
                }
                prev = Some(p);
            }
            TokenKind::RingClosure(digit) => {
                let p = prev.ok_or(ChemError::MissingAtom { offset: tok.start })?;
                let written = pending.take().map(|(o, _)| o);
                match rings.remove(digit) {
                    Some((other, first)) => {
                        if other == p {
                            return Err(ChemError::SelfLoop { digit: *digit });
                        }
                        if has_bond(&g, other, p) {
                            return Err(ChemError::DuplicateBond { digit: *digit });
                        }
                        let order = match (first, written) {
                            (Some(a), Some(b)) if a != b => return Err(ChemError::ConflictingRingBond { digit: *digit }),
                            (Some(a), _) | (None, Some(a)) => a,
                            (None, None) => default_bond(&g, other, p),
                        };
                        g.bonds.push(Bond { a: other, b: p, order });
                    }
                    None => {
                        rings.insert(*digit, (p, written));
                    }
                }
            }
            TokenKind::Dot => {
                if prev.is_none() {
                    return Err(ChemError::MissingAtom { offset: tok.start });
                }
                if let Some((_, at)) = pending {
                    return Err(ChemError::MissingAtom { offset: at });
                }
                prev = None;
                g.fragments += 1;
            }
        }
    }
    if let Some((_, at)) = pending {
        return Err(ChemError::MissingAtom { offset: at });
    }
    if prev.is_none() {
        // Trailing dot.
        let at = tokens.last().map_or(0, |t| t.start);
        return Err(ChemError::MissingAtom { offset: at });
    }
    if let Some(&(_, open, _)) = branches.last() {
        return Err(ChemError::UnclosedBranch { offset: open });
    }
    if let Some((&digit, _)) = rings.iter().next() {
        return Err(ChemError::UnclosedRing { digit });
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub atom: usize,
    pub element: String,
    /// Bond-order sum plus hydrogens; for aromatic atoms, degree plus
    /// explicit hydrogens.
    pub used: u32,
    pub max: u32,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "atom {} ({}) uses valence {} but allows {}", self.atom, self.element, self.used, self.max)
    }
}

/// Checks every atom against its charge-adjusted maximum valence. Elements
/// without a tabulated valence are not checked.
pub fn validate_molecule(g: &MolGraph) -> Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    for (i, atom) in g.atoms.iter().enumerate() {
        let Some(max) = max_valence(&atom.element, atom.charge) else {
            continue;
        };
        let used = if atom.aromatic {
            g.degree(i) as u32 + atom.explicit_h.unwrap_or(0)
        } else {
            g.bond_order_sum(i) + atom.explicit_h.unwrap_or(0)
        };
        if used > max {
            violations.push(Violation { atom: i, element: atom.element.clone(), used, max });
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Tokenizes, parses and validates in one step.
pub fn is_valid_smiles(s: &str) -> bool {
    parse_smiles(s).is_ok_and(|g| validate_molecule(&g).is_ok())
}

#[cfg(test)]
mod tests;
