//! Word-level text tokenization with punctuation splitting.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HUMAN: &str = "#Human:";
pub const ASSISTANT: &str = "#Assistant:";
pub const SKELETON_OPEN: &str = "<Skeleton>";
pub const SKELETON_FEATURE: &str = "<SkeletonFeature>";
pub const SKELETON_CLOSE: &str = "</Skeleton>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

pub const SPECIALS: [&str; 7] = [
    HUMAN,
    ASSISTANT,
    SKELETON_OPEN,
    SKELETON_FEATURE,
    SKELETON_CLOSE,
    EOS,
    UNK,
];

fn is_split_punct(c: char) -> bool {
    c.is_ascii_punctuation() && c != '\'' && c != '-'
}

/// Splits on whitespace, keeps special markers whole and gives every
/// punctuation mark its own token. Case is preserved.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if SPECIALS.contains(&chunk) {
            out.push(chunk.to_string());
            continue;
        }
        let mut cur = String::new();
        for c in chunk.chars() {
            if is_split_punct(c) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Inverse of [`split_words`] for text that follows ordinary spacing:
/// no space before closing punctuation or after an opening bracket.
pub fn join_words<S: AsRef<str>>(words: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = true;
    for w in words {
        let w = w.as_ref();
        let closing = matches!(w, "." | "," | "?" | "!" | ";" | ":" | "]" | ")");
        if !glue_next && !closing {
            out.push(' ');
        }
        out.push_str(w);
        glue_next = matches!(w, "[" | "(");
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    words: Vec<String>,
}

impl From<VocabFile> for Vocab {
    fn from(f: VocabFile) -> Self {
        Vocab::from_words(f.words)
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile { words: v.words }
    }
}

impl Vocab {
    fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { words, index }
    }

    /// Special markers first, then every word of `texts` in sorted order.
    pub fn build<S: AsRef<str>>(texts: &[S]) -> Self {
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for t in texts {
            seen.extend(split_words(t.as_ref()));
        }
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        words.extend(seen.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())));
        Self::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn special(&self, word: &str) -> usize {
        self.id(word).expect("special markers are always present")
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words.get(id).map(String::as_str).ok_or_else(|| {
            Error::param(format!(
                "token id {id} outside vocabulary of {}",
                self.words.len()
            ))
        })
    }

    /// Token ids of `text`; unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let unk = self.special(UNK);
        split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(unk))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&i| self.word(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(join_words(&words))
    }
}
