//! Whitespace-and-punctuation tokenizer with a corpus-built vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

const TWO_CHAR_OPS: &[&str] = &[
    "==", "!=", "<=", ">=", "&&", "||", "->", "=>", "::", "+=", "-=", "*=", "/=", "%=", "++", "--",
    "<<", ">>", "**", "//",
];

/// Split source text into surface tokens: identifiers, numbers, two-char
/// operators and single punctuation characters.
pub fn split_tokens(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < text.len() {
        let c = text[i..].chars().next().expect("in bounds");
        let w = c.len_utf8();
        if c.is_whitespace() {
            i += w;
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            i += w;
            while let Some(c) = text[i..].chars().next() {
                if c.is_alphanumeric() || c == '_' {
                    i += c.len_utf8();
                } else {
                    break;
                }
            }
            out.push(&text[start..i]);
        } else if c.is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            out.push(&text[start..i]);
        } else {
            if i + 2 <= text.len() && text.is_char_boundary(i + 2) {
                let pair = &text[i..i + 2];
                if TWO_CHAR_OPS.contains(&pair) {
                    out.push(pair);
                    i += 2;
                    continue;
                }
            }
            out.push(&text[i..i + w]);
            i += w;
        }
    }
    out
}

/// Token ids framed by `[CLS]` ... `[SEP]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Build from texts. Tokens are ordered by descending frequency, ties
    /// broken lexicographically; `max_size` includes the four specials.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: Option<usize>) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for tok in split_tokens(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        let room = max_size.map_or(usize::MAX, |m| m.saturating_sub(tokens.len()));
        tokens.extend(
            ranked
                .into_iter()
                .filter(|(t, _)| ![PAD, UNK, CLS, SEP].contains(t))
                .take(room)
                .map(|(t, _)| t.to_string()),
        );
        tokens.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Tokenize and frame `text`, truncating so the result has at most
    /// `max_len` ids with `[SEP]` last.
    pub fn tokenize(&self, text: &str, max_len: usize) -> TokenSequence {
        let room = max_len.saturating_sub(2);
        let mut ids = Vec::with_capacity(room.min(64) + 2);
        ids.push(CLS_ID);
        ids.extend(split_tokens(text).into_iter().take(room).map(|t| self.id(t)));
        ids.push(SEP_ID);
        TokenSequence { ids }
    }
}
