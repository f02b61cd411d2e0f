//! Fixed token layout shared by the model, the task generators and ingestion.
//!
//! | ids      | use                                  |
//! |----------|--------------------------------------|
//! | 0..6     | `<pad> <s> </s> <unk> <sep> <mask>`  |
//! | 6..16    | prompt words                         |
//! | 16..32   | segment markers `<m0>`..`<m15>`      |
//! | 32..     | content words                        |

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SEP: usize = 4;
pub const MASK: usize = 5;

pub const PROMPT_SUMMARIZE: usize = 6;
pub const PROMPT_AND: usize = 7;
pub const PROMPT_ANSWER: usize = 8;
pub const PROMPT_THE: usize = 9;
pub const PROMPT_QUESTION: usize = 10;
pub const PROMPT_COPY: usize = 11;
pub const PROMPT_DENOISE: usize = 12;
pub const PROMPT_RANGE: std::ops::Range<usize> = 6..16;

pub const MARKER_BASE: usize = 16;
pub const N_MARKERS: usize = 16;
pub const CONTENT_BASE: usize = MARKER_BASE + N_MARKERS;

const SPECIAL_WORDS: [&str; 6] = ["<pad>", "<s>", "</s>", "<unk>", "<sep>", "<mask>"];
const PROMPT_WORDS: [&str; 7] = [
    "<summarize>",
    "<and>",
    "<answer>",
    "<the>",
    "<question>",
    "<copy>",
    "<denoise>",
];

pub fn marker(i: usize) -> usize {
    assert!(i < N_MARKERS);
    MARKER_BASE + i
}

pub fn is_marker(id: usize) -> bool {
    (MARKER_BASE..CONTENT_BASE).contains(&id)
}

pub fn is_content(id: usize) -> bool {
    id >= CONTENT_BASE
}

/// Word ↔ id table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        Self::from_words(words)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    fn reserved() -> Vec<String> {
        let mut words: Vec<String> = SPECIAL_WORDS.iter().map(|s| s.to_string()).collect();
        words.extend(PROMPT_WORDS.iter().map(|s| s.to_string()));
        while words.len() < MARKER_BASE {
            words.push(format!("<p{}>", words.len()));
        }
        words.extend((0..N_MARKERS).map(|i| format!("<m{i}>")));
        words
    }

    fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    /// Reserved ids plus placeholder content words `w32`, `w33`, ...
    pub fn synthetic(size: usize) -> Result<Self> {
        if size <= CONTENT_BASE {
            return Err(Error::Config(format!(
                "vocab size must exceed {CONTENT_BASE}, got {size}"
            )));
        }
        let mut words = Self::reserved();
        words.extend((CONTENT_BASE..size).map(|i| format!("w{i}")));
        Ok(Self::from_words(words))
    }

    /// Reserved ids plus the most frequent whitespace words of `texts`
    /// (ties alphabetical), capped at `size` entries in total.
    pub fn from_corpus<'a>(size: usize, texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        if size <= CONTENT_BASE {
            return Err(Error::Config(format!(
                "vocab size must exceed {CONTENT_BASE}, got {size}"
            )));
        }
        let mut words = Self::reserved();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in texts {
            for w in t.split_whitespace() {
                if !words.iter().any(|r| r == w) {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        words.extend(ranked.into_iter().take(size - CONTENT_BASE).map(|(w, _)| w.to_string()));
        Ok(Self::from_words(words))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or("<unk>", String::as_str)
    }

    /// Whitespace tokenization; unknown words map to [`UNK`].
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_stable() {
        let v = Vocab::synthetic(200).unwrap();
        assert_eq!(v.len(), 200);
        assert_eq!(v.word(BOS), "<s>");
        assert_eq!(v.word(PROMPT_QUESTION), "<question>");
        assert_eq!(v.word(marker(3)), "<m3>");
        assert_eq!(v.word(CONTENT_BASE), "w32");
        assert_eq!(v.id("w40"), 40);
        assert_eq!(v.id("nope"), UNK);
    }

    #[test]
    fn corpus_vocab_ranks_by_frequency() {
        let v = Vocab::from_corpus(CONTENT_BASE + 2, ["b a b", "c b a"]).unwrap();
        assert_eq!(v.word(CONTENT_BASE), "b");
        assert_eq!(v.word(CONTENT_BASE + 1), "a");
        assert_eq!(v.id("c"), UNK);
        assert_eq!(v.decode(&v.encode("a b c")), "a b <unk>");
    }
}
