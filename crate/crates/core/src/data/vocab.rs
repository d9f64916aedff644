use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token/id bijection. Ids 0..4 are pad, start, end and unknown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from token occurrences, most frequent first and
    /// ties in lexicographic order.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        let mut sorted: Vec<(&str, usize)> = counts.into_iter().filter(|(t, _)| !RESERVED.contains(t)).collect();
        sorted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_list(RESERVED.iter().copied().chain(sorted.into_iter().map(|(t, _)| t)).map(String::from).collect())
            .expect("reserved tokens lead and entries are unique")
    }

    /// Vocabulary whose id is the position in `tokens`. The first four
    /// entries must be the reserved tokens.
    pub fn from_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Parameter(format!("vocabulary must start with {}", RESERVED.join(" "))));
        }
        let mut ids = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Parameter(format!("duplicate vocabulary entry {t}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or(Error::Vocabulary { id, size: self.len() })
    }

    /// Unknown tokens map to the unknown id.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(crate::decoder::UNK)).collect()
    }

    /// Tokens for `ids`, stopping at the first end token and skipping pads.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for &id in ids {
            if id == crate::decoder::END {
                break;
            }
            if id == crate::decoder::PAD || id == crate::decoder::START {
                continue;
            }
            out.push(self.token(id)?.to_string());
        }
        Ok(out)
    }
}
