use crate::error::{Error, Result};
use crate::two_stream::{TokenSequence, CLS_ID, NUM_SPECIAL, UNK_ID};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

pub const CLS: &str = "[CLS]";
pub const MASK: &str = "[MASK]";
pub const UNK: &str = "[UNK]";

/// Word list with the three special tokens at ids 0..3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    words: Vec<String>,
    nouns: HashSet<usize>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    words: Vec<String>,
    nouns: Vec<String>,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        let specials = [CLS, MASK, UNK];
        if r.words.len() < NUM_SPECIAL || r.words[..NUM_SPECIAL] != specials {
            return Err(Error::validation("vocabulary must start with [CLS] [MASK] [UNK]"));
        }
        let nouns: HashSet<&str> = r.nouns.iter().map(String::as_str).collect();
        let plain: Vec<(&str, bool)> = r.words[NUM_SPECIAL..]
            .iter()
            .map(|w| (w.as_str(), nouns.contains(w.as_str())))
            .collect();
        Vocab::new(plain)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        let mut nouns: Vec<usize> = v.nouns.iter().copied().collect();
        nouns.sort_unstable();
        Self {
            nouns: nouns.into_iter().map(|i| v.words[i].clone()).collect(),
            words: v.words,
        }
    }
}

impl Vocab {
    /// Builds a vocabulary from `(word, is_noun)`; words are lowercased.
    pub fn new<'a, I>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, bool)>,
    {
        let mut v = Self {
            words: [CLS, MASK, UNK].iter().map(|s| s.to_string()).collect(),
            nouns: HashSet::new(),
            index: HashMap::new(),
        };
        for (i, w) in v.words.iter().enumerate() {
            v.index.insert(w.clone(), i);
        }
        for (w, noun) in words {
            let w = w.to_lowercase();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::validation(format!("invalid vocabulary word {w:?}")));
            }
            if v.index.contains_key(&w) {
                return Err(Error::validation(format!("duplicate vocabulary word {w:?}")));
            }
            let id = v.words.len();
            v.index.insert(w.clone(), id);
            v.words.push(w);
            if noun {
                v.nouns.insert(id);
            }
        }
        Ok(v)
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

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn is_noun(&self, id: usize) -> bool {
        self.nouns.contains(&id)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Whitespace split, lowercase, unknown words to `[UNK]`, `[CLS]` prepended.
/// Noun flags come from the vocabulary.
pub fn tokenize(text: &str, vocab: &Vocab) -> TokenSequence {
    let mut ids = vec![CLS_ID];
    for w in text.split_whitespace() {
        ids.push(vocab.id(&w.to_lowercase()).unwrap_or(UNK_ID));
    }
    let nouns = ids.iter().map(|&i| vocab.is_noun(i)).collect();
    TokenSequence::new(ids, nouns).expect("starts with [CLS]")
}

/// Space-joined words after `[CLS]`.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocab) -> String {
    seq.ids()[1..]
        .iter()
        .map(|&i| vocab.word(i).unwrap_or(UNK))
        .collect::<Vec<_>>()
        .join(" ")
}
