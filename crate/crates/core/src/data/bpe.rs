//! Byte-pair encoding: learn merges on word frequencies, segment words into
//! subwords marked with a trailing `@@` when the word continues.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

const EOW: &str = "</w>";
pub const CONTINUATION: &str = "@@";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: BTreeMap<(String, String), usize>,
}

fn symbols(word: &str) -> Vec<String> {
    let mut out: Vec<String> = word.chars().map(String::from).collect();
    if let Some(last) = out.last_mut() {
        last.push_str(EOW);
    }
    out
}

fn merge_pair(word: &[String], pair: &(String, String)) -> Vec<String> {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && word[i] == pair.0 && word[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(word[i].clone());
            i += 1;
        }
    }
    out
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Self {
        let ranks = merges.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();
        Self { merges, ranks }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Learns up to `num_merges` merges from word occurrences. Each round
    /// merges the most frequent adjacent pair, the lexicographically smallest
    /// on ties. Stops early when no pair is left.
    pub fn learn<'a>(words: impl IntoIterator<Item = &'a str>, num_merges: i64) -> Result<Self> {
        if num_merges < 0 {
            return Err(Error::Parameter(format!("number of merges must be non-negative, got {num_merges}")));
        }
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for w in words {
            if !w.is_empty() {
                *freq.entry(w).or_default() += 1;
            }
        }
        if freq.is_empty() {
            return Err(Error::EmptyInput("BPE corpus"));
        }
        let mut vocab: Vec<(Vec<String>, usize)> = freq.into_iter().map(|(w, c)| (symbols(w), c)).collect();
        let mut merges = Vec::new();
        for _ in 0..num_merges {
            let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (syms, c) in &vocab {
                for w in syms.windows(2) {
                    *pairs.entry((&w[0], &w[1])).or_default() += c;
                }
            }
            // BTreeMap iterates in lexicographic order, so the first maximum wins ties.
            let Some((best, _)) = pairs.iter().fold(None, |acc: Option<(&(&str, &str), usize)>, (p, &c)| match acc {
                Some((_, bc)) if bc >= c => acc,
                _ => Some((p, c)),
            }) else {
                break;
            };
            let pair = (String::from(best.0), String::from(best.1));
            for (syms, _) in &mut vocab {
                *syms = merge_pair(syms, &pair);
            }
            merges.push(pair);
        }
        Ok(Self::from_merges(merges))
    }

    /// Subwords of one token; all but the last carry the `@@` marker.
    pub fn apply(&self, token: &str) -> Vec<String> {
        let mut word = symbols(token);
        loop {
            let best = word
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, (w[0].clone(), w[1].clone()))))
                .min_by_key(|(r, _)| *r);
            match best {
                Some((_, pair)) => word = merge_pair(&word, &pair),
                None => break,
            }
        }
        let n = word.len();
        word.into_iter()
            .enumerate()
            .map(|(i, mut s)| {
                if i + 1 == n {
                    s.truncate(s.len() - EOW.len());
                } else {
                    s.push_str(CONTINUATION);
                }
                s
            })
            .collect()
    }

    /// Segments a whole token sequence.
    pub fn apply_all<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<String> {
        tokens.iter().flat_map(|t| self.apply(t.as_ref())).collect()
    }

    /// Subword symbols the model can produce, for vocabulary coverage checks.
    pub fn symbol_set(&self) -> BTreeSet<String> {
        self.merges.iter().map(|(a, b)| format!("{a}{b}")).collect()
    }
}

/// Inverse of [`BpeModel::apply`] for one token.
pub fn join(subwords: &[String]) -> String {
    let n = subwords.len();
    let mut out = String::new();
    for (i, s) in subwords.iter().enumerate() {
        if i + 1 < n {
            out.push_str(s.strip_suffix(CONTINUATION).unwrap_or(s));
        } else {
            out.push_str(s);
        }
    }
    out
}

/// Rejoins a subword sequence into tokens: a piece ending in `@@` continues
/// into the next one.
pub fn join_sentence<S: AsRef<str>>(subwords: &[S]) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut open = false;
    for s in subwords {
        let s = s.as_ref();
        match s.strip_suffix(CONTINUATION) {
            Some(stem) => {
                cur.push_str(stem);
                open = true;
            }
            None => {
                cur.push_str(s);
                out.push(core::mem::take(&mut cur));
                open = false;
            }
        }
    }
    if open {
        out.push(cur);
    }
    out
}
