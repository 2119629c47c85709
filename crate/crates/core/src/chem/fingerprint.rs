use super::{ChemError, MolGraph};

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_seq(values: impl IntoIterator<Item = u64>) -> u64 {
    values
        .into_iter()
        .fold(0x9e37_79b9_7f4a_7c15, |h, v| mix(h.wrapping_add(0x9e37_79b9_7f4a_7c15) ^ v))
}

fn element_code(element: &str) -> u64 {
    element.bytes().fold(0u64, |acc, b| (acc << 8) | b as u64)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Fingerprint {
    words: Vec<u64>,
    nbits: usize,
    radius: usize,
}

impl Fingerprint {
    pub fn nbits(&self) -> usize {
        self.nbits
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn get(&self, bit: usize) -> bool {
        bit < self.nbits && self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    /// Indices of set bits in increasing order.
    pub fn ones(&self) -> Vec<usize> {
        (0..self.nbits).filter(|&b| self.get(b)).collect()
    }

    fn set(&mut self, hash: u64) {
        let bit = (hash % self.nbits as u64) as usize;
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    /// Builds a fingerprint from explicit bit indices.
    pub fn from_bits(nbits: usize, bits: &[usize]) -> Result<Self, ChemError> {
        check_nbits(nbits)?;
        let mut fp = Self { words: vec![0; nbits.div_ceil(64)], nbits, radius: 0 };
        for &b in bits {
            if b >= nbits {
                return Err(ChemError::Contract(format!("bit {b} outside {nbits}-bit fingerprint")));
            }
            fp.words[b / 64] |= 1 << (b % 64);
        }
        Ok(fp)
    }
}

fn check_nbits(nbits: usize) -> Result<(), ChemError> {
    if !nbits.is_power_of_two() {
        return Err(ChemError::Contract(format!("fingerprint length must be a power of two, got {nbits}")));
    }
    Ok(())
}

/// Circular fingerprint: each atom starts from (element, degree, charge,
/// hydrogens, aromatic) and is re-hashed `radius` times with its sorted
/// (bond order, neighbor invariant) pairs. Every invariant of every round
/// sets one bit.
pub fn morgan_fingerprint(g: &MolGraph, radius: usize, nbits: usize) -> Result<Fingerprint, ChemError> {
    check_nbits(nbits)?;
    let mut fp = Fingerprint { words: vec![0; nbits.div_ceil(64)], nbits, radius };
    let mut inv: Vec<u64> = (0..g.atoms.len())
        .map(|i| {
            let a = &g.atoms[i];
            hash_seq([
                element_code(&a.element),
                g.degree(i) as u64,
                a.charge as i64 as u64,
                g.hydrogens(i) as u64,
                a.aromatic as u64,
            ])
        })
        .collect();
    for &h in &inv {
        fp.set(h);
    }
    for round in 0..radius {
        let next: Vec<u64> = (0..g.atoms.len())
            .map(|i| {
                let mut env: Vec<(u64, u64)> = g.neighbors(i).map(|(n, o)| (o.code(), inv[n])).collect();
                env.sort_unstable();
                let flat = env.into_iter().flat_map(|(o, h)| [o, h]);
                hash_seq([round as u64 + 1, inv[i]].into_iter().chain(flat))
            })
            .collect();
        for &h in &next {
            fp.set(h);
        }
        inv = next;
    }
    Ok(fp)
}

/// `|a ∧ b| / |a ∨ b|`, with two empty fingerprints scoring 1.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64, ChemError> {
    if a.nbits != b.nbits {
        return Err(ChemError::Contract(format!("fingerprint lengths differ: {} vs {}", a.nbits, b.nbits)));
    }
    let (mut both, mut either) = (0u32, 0u32);
    for (x, y) in a.words.iter().zip(&b.words) {
        both += (x & y).count_ones();
        either += (x | y).count_ones();
    }
    Ok(if either == 0 { 1.0 } else { both as f64 / either as f64 })
}
