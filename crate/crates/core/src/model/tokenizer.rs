//! Word-level tokenizer over a closed vocabulary.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const NEWLINE: &str = "\n";

/// Punctuation that attaches to the preceding word when detokenizing.
const CLOSING: [&str; 8] = [".", ",", "?", "!", ":", ";", ")", "'s"];
const TRAILING_CHARS: &[char] = &['.', ',', '?', '!', ':', ';', ')', '"'];
const LEADING_CHARS: &[char] = &['(', '"'];

/// Split text into word-level pieces. Pure function of the input string.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for (li, line) in text.split('\n').enumerate() {
        if li > 0 {
            out.push(NEWLINE.to_string());
        }
        for chunk in line.split_whitespace() {
            split_chunk(chunk, &mut out);
        }
    }
    out
}

fn split_chunk(chunk: &str, out: &mut Vec<String>) {
    let mut core = chunk;
    while let Some(c) = core.chars().next() {
        if LEADING_CHARS.contains(&c) && core.len() > 1 {
            out.push(c.to_string());
            core = &core[c.len_utf8()..];
        } else {
            break;
        }
    }
    let mut trailing = Vec::new();
    while let Some(c) = core.chars().last() {
        if TRAILING_CHARS.contains(&c) && core.len() > 1 {
            trailing.push(c.to_string());
            core = &core[..core.len() - c.len_utf8()];
        } else {
            break;
        }
    }
    if core.len() > 2 && core.ends_with("'s") {
        out.push(core[..core.len() - 2].to_string());
        out.push("'s".to_string());
    } else if !core.is_empty() {
        out.push(core.to_string());
    }
    out.extend(trailing.into_iter().rev());
}

/// Join word pieces back into normalized text.
pub fn join_words<S: AsRef<str>>(words: &[S]) -> String {
    let mut text = String::new();
    let mut glue_next = true;
    for w in words {
        let w = w.as_ref();
        if w == NEWLINE {
            text.push('\n');
            glue_next = true;
            continue;
        }
        if !glue_next && !CLOSING.contains(&w) {
            text.push(' ');
        }
        text.push_str(w);
        glue_next = w == "(";
    }
    text
}

/// Canonical whitespace/punctuation form of a string.
pub fn normalize(text: &str) -> String {
    join_words(&split_words(text))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<u32>,
    /// Number of out-of-vocabulary words replaced by `<unk>`.
    pub unknown: usize,
}

impl Tokenized {
    pub fn has_unknown(&self) -> bool {
        self.unknown > 0
    }
}

impl Vocabulary {
    /// Build a vocabulary from every word in `texts`; tokens after the
    /// specials are sorted so the result does not depend on input order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            for w in split_words(t) {
                words.insert(w);
            }
        }
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Restore the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
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

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn tokenize(&self, text: &str) -> Tokenized {
        let mut unknown = 0;
        let ids = split_words(text)
            .iter()
            .map(|w| match self.index.get(w) {
                Some(&i) => i,
                None => {
                    unknown += 1;
                    UNK
                }
            })
            .collect();
        Tokenized { ids, unknown }
    }

    /// Token ids of `text`, with out-of-vocabulary words mapped to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.tokenize(text).ids
    }

    /// Detokenize, skipping special tokens.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| i >= UNK)
            .map(|&i| self.token(i))
            .collect();
        join_words(&words)
    }
}
