use super::ChemError;

/// Every element symbol accepted inside brackets.
const ELEMENTS: [&str; 118] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca", "Sc", "Ti", "V",
    "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru",
    "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn",
    "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh",
    "Hs", "Mt", "Ds", "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og",
];

/// Lowercase (aromatic) symbols accepted inside brackets.
const AROMATIC_BRACKET: [&str; 8] = ["se", "as", "te", "b", "c", "n", "o", "p"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BondSymbol {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondSymbol {
    pub fn order(self) -> super::BondOrder {
        match self {
            Self::Single => super::BondOrder::Single,
            Self::Double => super::BondOrder::Double,
            Self::Triple => super::BondOrder::Triple,
            Self::Aromatic => super::BondOrder::Aromatic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtomSpec {
    /// Capitalized element symbol ("C" for both `C` and `c`).
    pub element: String,
    pub aromatic: bool,
    pub charge: i32,
    /// Explicit hydrogens; `None` for organic-subset atoms, whose hydrogens
    /// are implicit.
    pub hydrogens: Option<u32>,
    pub isotope: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenKind {
    Atom(AtomSpec),
    BracketAtom(AtomSpec),
    /// `/` and `\` are read as [`BondSymbol::Single`].
    Bond(BondSymbol),
    BranchOpen,
    BranchClose,
    RingClosure(u32),
    Dot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmilesToken {
    pub kind: TokenKind,
    /// Character offsets `[start, end)`.
    pub start: usize,
    pub end: usize,
}

fn organic(element: &str, aromatic: bool) -> TokenKind {
    TokenKind::Atom(AtomSpec { element: element.into(), aromatic, charge: 0, hydrogens: None, isotope: None })
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_ascii_uppercase().to_string() + c.as_str(),
        None => String::new(),
    }
}

struct Cursor<'a> {
    chars: &'a [char],
    pos: usize,
}

impl Cursor<'_> {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn peek2(&self) -> Option<char> {
        self.chars.get(self.pos + 1).copied()
    }

    fn digits(&mut self) -> Option<u32> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return None;
        }
        self.chars[start..self.pos].iter().collect::<String>().parse().ok()
    }

    fn err(&self, at: usize, ch: Option<char>) -> ChemError {
        ChemError::Tokenize { offset: at, ch }
    }
}

fn bracket(cur: &mut Cursor<'_>, open: usize) -> Result<AtomSpec, ChemError> {
    let isotope = cur.digits();
    let sym_at = cur.pos;
    let first = cur.peek().ok_or_else(|| cur.err(sym_at, None))?;
    let (element, aromatic) = if first.is_ascii_uppercase() {
        let two: Option<String> = cur.peek2().filter(char::is_ascii_lowercase).map(|c| format!("{first}{c}"));
        match two {
            Some(s) if ELEMENTS.contains(&s.as_str()) => {
                cur.pos += 2;
                (s, false)
            }
            _ if ELEMENTS.contains(&first.to_string().as_str()) => {
                cur.pos += 1;
                (first.to_string(), false)
            }
            _ => return Err(cur.err(sym_at, Some(first))),
        }
    } else if first.is_ascii_lowercase() {
        let two: Option<String> = cur.peek2().filter(char::is_ascii_lowercase).map(|c| format!("{first}{c}"));
        match two {
            Some(s) if AROMATIC_BRACKET.contains(&s.as_str()) => {
                cur.pos += 2;
                (capitalize(&s), true)
            }
            _ if AROMATIC_BRACKET.contains(&first.to_string().as_str()) => {
                cur.pos += 1;
                (first.to_ascii_uppercase().to_string(), true)
            }
            _ => return Err(cur.err(sym_at, Some(first))),
        }
    } else {
        return Err(cur.err(sym_at, Some(first)));
    };
    // Chirality is accepted and discarded.
    while cur.peek() == Some('@') {
        cur.pos += 1;
    }
    let mut hydrogens = Some(0);
    if cur.peek() == Some('H') {
        cur.pos += 1;
        hydrogens = Some(cur.digits().unwrap_or(1));
    }
    let mut charge = 0i32;
    if let Some(sign @ ('+' | '-')) = cur.peek() {
        let unit = if sign == '+' { 1 } else { -1 };
        cur.pos += 1;
        if let Some(n) = cur.digits() {
            charge = unit * n as i32;
        } else {
            charge = unit;
            while cur.peek() == Some(sign) {
                cur.pos += 1;
                charge += unit;
            }
        }
    }
    // Atom class, accepted and discarded.
    if cur.peek() == Some(':') {
        cur.pos += 1;
        if cur.digits().is_none() {
            return Err(cur.err(cur.pos, cur.peek()));
        }
    }
    match cur.peek() {
        Some(']') => {
            cur.pos += 1;
            Ok(AtomSpec { element, aromatic, charge, hydrogens, isotope })
        }
        other => Err(if other.is_none() { cur.err(open, Some('[')) } else { cur.err(cur.pos, other) }),
    }
}

/// Splits a SMILES string into tokens whose spans tile the input.
pub fn tokenize_smiles(s: &str) -> Result<Vec<SmilesToken>, ChemError> {
    let chars: Vec<char> = s.chars().collect();
    let mut cur = Cursor { chars: &chars, pos: 0 };
    let mut out = Vec::new();
    while let Some(c) = cur.peek() {
        let start = cur.pos;
        let kind = match c {
            'C' if cur.peek2() == Some('l') => {
                cur.pos += 2;
                organic("Cl", false)
            }
            'B' if cur.peek2() == Some('r') => {
                cur.pos += 2;
                organic("Br", false)
            }
            'B' | 'C' | 'N' | 'O' | 'P' | 'S' | 'F' | 'I' => {
                cur.pos += 1;
                organic(&c.to_string(), false)
            }
            'b' | 'c' | 'n' | 'o' | 'p' | 's' => {
                cur.pos += 1;
                organic(&c.to_ascii_uppercase().to_string(), true)
            }
            '[' => {
                cur.pos += 1;
                TokenKind::BracketAtom(bracket(&mut cur, start)?)
            }
            '-' | '/' | '\\' => {
                cur.pos += 1;
                TokenKind::Bond(BondSymbol::Single)
            }
            '=' => {
                cur.pos += 1;
                TokenKind::Bond(BondSymbol::Double)
            }
            '#' => {
                cur.pos += 1;
                TokenKind::Bond(BondSymbol::Triple)
            }
            ':' => {
                cur.pos += 1;
                TokenKind::Bond(BondSymbol::Aromatic)
            }
            '(' => {
                cur.pos += 1;
                TokenKind::BranchOpen
            }
            ')' => {
                cur.pos += 1;
                TokenKind::BranchClose
            }
            '.' => {
                cur.pos += 1;
                TokenKind::Dot
            }
            '1'..='9' => {
                cur.pos += 1;
                TokenKind::RingClosure(c as u32 - '0' as u32)
            }
            '%' => {
                let pair = (cur.peek2(), chars.get(start + 2).copied());
                match pair {
                    (Some(a @ '1'..='9'), Some(b)) if b.is_ascii_digit() => {
                        cur.pos += 3;
                        TokenKind::RingClosure((a as u32 - '0' as u32) * 10 + (b as u32 - '0' as u32))
                    }
                    _ => return Err(cur.err(start, Some('%'))),
                }
            }
            other => return Err(cur.err(start, Some(other))),
        };
        out.push(SmilesToken { kind, start, end: cur.pos });
    }
    Ok(out)
}
