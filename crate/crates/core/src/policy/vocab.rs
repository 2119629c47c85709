use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::PolicyError;

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const PAD: TokenId = 2;
pub const SEP: TokenId = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<bos>", "<eos>", "<pad>", "<sep>"];

/// Character vocabulary: four reserved specials followed by the sorted set of
/// characters seen in a corpus scan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, TokenId>,
}

impl Vocab {
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        Self::from_chars(set.into_iter().collect())
    }

    fn from_chars(chars: Vec<char>) -> Self {
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, (i + NUM_SPECIALS) as TokenId))
            .collect();
        Self { chars, index }
    }

    /// Total symbol count including the specials.
    pub fn len(&self) -> usize {
        self.chars.len() + NUM_SPECIALS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> Option<TokenId> {
        self.index.get(&c).copied()
    }

    pub fn symbol(&self, id: TokenId) -> Option<String> {
        let i = id as usize;
        if i < NUM_SPECIALS {
            Some(SPECIAL_NAMES[i].to_string())
        } else {
            self.chars.get(i - NUM_SPECIALS).map(|c| c.to_string())
        }
    }

    /// Maps every character to its id; fails on the first character outside
    /// the vocabulary, reporting its character offset.
    pub fn encode(&self, s: &str) -> Result<Vec<TokenId>, PolicyError> {
        s.chars()
            .enumerate()
            .map(|(offset, ch)| self.id(ch).ok_or(PolicyError::Oov { ch, offset }))
            .collect()
    }

    /// Concatenates the characters of non-special ids.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter_map(|&id| (id as usize).checked_sub(NUM_SPECIALS).and_then(|i| self.chars.get(i)))
            .collect()
    }

    /// `[BOS] ++ encode(prompt)`
    pub fn encode_prompt(&self, prompt: &str) -> Result<Vec<TokenId>, PolicyError> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(prompt)?);
        Ok(ids)
    }

    /// `encode(target) ++ [EOS]`
    pub fn encode_target(&self, target: &str) -> Result<Vec<TokenId>, PolicyError> {
        let mut ids = self.encode(target)?;
        ids.push(EOS);
        Ok(ids)
    }
}

impl Serialize for Vocab {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let symbols: Vec<String> = self.chars.iter().map(|c| c.to_string()).collect();
        symbols.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let symbols = Vec::<String>::deserialize(d)?;
        let mut chars = Vec::with_capacity(symbols.len());
        for s in &symbols {
            let mut it = s.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => return Err(D::Error::custom(format!("vocabulary symbol {s:?} is not one character"))),
            }
        }
        if chars.windows(2).any(|w| w[0] >= w[1]) {
            return Err(D::Error::custom("vocabulary symbols must be sorted and unique"));
        }
        Ok(Self::from_chars(chars))
    }
}
