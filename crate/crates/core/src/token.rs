//! Vocabulary handling and longest-match tokenization.
//!
//! A [`Vocabulary`] is a dense table of token texts. [`Vocabulary::tokenize`]
//! implements greedy tokenization: at every position the longest vocabulary
//! token matching the input is taken. Completion trees are built from these
//! sequences, so the rule must agree with the model's tokenizer on the
//! candidate strings (see [`crate::backend::ModelBackend::tokenize_upstream`]).

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TokenError {
    #[error("no vocabulary token matches {text:?} at byte offset {offset}")]
    UncoverableText { text: String, offset: usize },
    #[error("token id {0} is out of range")]
    UnknownId(u32),
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("token text must not be empty (id {0})")]
    EmptyToken(u32),
    #[error("duplicate token text {text:?} (ids {first} and {second})")]
    DuplicateText {
        text: String,
        first: u32,
        second: u32,
    },
    #[error("vocabulary ids must be dense in [0, {size}): {detail}")]
    SparseIds { size: usize, detail: String },
    #[error("vocabulary file line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("vocabulary io: {0}")]
    Io(String),
}

/// Bijection between token ids and token texts.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    texts: Vec<String>,
    by_text: HashMap<String, TokenId>,
    max_token_bytes: usize,
}

impl Vocabulary {
    /// Builds a vocabulary where the id of each token is its position.
    pub fn from_texts<I, S>(texts: I) -> Result<Self, TokenError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let texts: Vec<String> = texts.into_iter().map(Into::into).collect();
        if texts.is_empty() {
            return Err(TokenError::EmptyVocabulary);
        }
        let mut by_text = HashMap::with_capacity(texts.len());
        let mut max_token_bytes = 0;
        for (i, text) in texts.iter().enumerate() {
            if text.is_empty() {
                return Err(TokenError::EmptyToken(i as u32));
            }
            if let Some(prev) = by_text.insert(text.clone(), TokenId(i as u32)) {
                return Err(TokenError::DuplicateText {
                    text: text.clone(),
                    first: prev.0,
                    second: i as u32,
                });
            }
            max_token_bytes = max_token_bytes.max(text.len());
        }
        Ok(Self {
            texts,
            by_text,
            max_token_bytes,
        })
    }

    /// Builds a vocabulary from explicit `(id, text)` entries in any order.
    pub fn from_entries(entries: Vec<(u32, String)>) -> Result<Self, TokenError> {
        let size = entries.len();
        let mut slots: Vec<Option<String>> = vec![None; size];
        for (id, text) in entries {
            let idx = id as usize;
            if idx >= size {
                return Err(TokenError::SparseIds {
                    size,
                    detail: format!("id {id} out of range"),
                });
            }
            if slots[idx].is_some() {
                return Err(TokenError::SparseIds {
                    size,
                    detail: format!("id {id} repeated"),
                });
            }
            slots[idx] = Some(text);
        }
        // every slot is filled: `size` unique ids all below `size`
        Self::from_texts(slots.into_iter().map(|s| s.unwrap_or_default()))
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn text(&self, id: TokenId) -> &str {
        &self.texts[id.index()]
    }

    pub fn get_text(&self, id: TokenId) -> Option<&str> {
        self.texts.get(id.index()).map(String::as_str)
    }

    pub fn id(&self, text: &str) -> Option<TokenId> {
        self.by_text.get(text).copied()
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id.index() < self.texts.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.texts.len() as u32).map(TokenId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, &str)> + '_ {
        self.texts
            .iter()
            .enumerate()
            .map(|(i, t)| (TokenId(i as u32), t.as_str()))
    }

    /// Longest-match tokenization of `text`.
    pub fn tokenize(&self, text: &str) -> Result<TokenSeq, TokenError> {
        let mut tokens = Vec::new();
        let mut offset = 0;
        while offset < text.len() {
            let rest = &text[offset..];
            let mut end = rest.len().min(self.max_token_bytes);
            let found = loop {
                if end == 0 {
                    break None;
                }
                if rest.is_char_boundary(end) {
                    if let Some(id) = self.id(&rest[..end]) {
                        break Some((id, end));
                    }
                }
                end -= 1;
            };
            match found {
                Some((id, len)) => {
                    tokens.push(id);
                    offset += len;
                }
                None => {
                    return Err(TokenError::UncoverableText {
                        text: text.to_string(),
                        offset,
                    })
                }
            }
        }
        Ok(TokenSeq::from_ids(self, tokens))
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&id| self.text(id)).collect()
    }

    /// Reads the `<id>\t<escaped text>` line format.
    pub fn read_from<R: Read>(reader: R) -> Result<Self, TokenError> {
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(reader).lines().enumerate() {
            let line_no = n + 1;
            let line = line.map_err(|e| TokenError::Io(e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            let (id, escaped) = line.split_once('\t').ok_or_else(|| TokenError::Format {
                line: line_no,
                reason: "missing tab separator".into(),
            })?;
            let id: u32 = id.trim().parse().map_err(|_| TokenError::Format {
                line: line_no,
                reason: format!("bad token id {id:?}"),
            })?;
            let text = unescape(escaped).map_err(|reason| TokenError::Format {
                line: line_no,
                reason,
            })?;
            entries.push((id, text));
        }
        Self::from_entries(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenError> {
        let file = std::fs::File::open(path.as_ref())
            .map_err(|e| TokenError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::read_from(file)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (id, text) in self.iter() {
            writeln!(out, "{}\t{}", id, escape(text))?;
        }
        Ok(())
    }
}

pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape(text: &str) -> Result<String, String> {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some(other) => return Err(format!("unknown escape \\{other}")),
            None => return Err("dangling backslash".into()),
        }
    }
    Ok(out)
}

/// Characters that may continue an identifier.
pub fn is_identifier_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

/// Length in bytes of the maximal leading run of identifier characters.
pub fn identifier_run(text: &str) -> usize {
    text.char_indices()
        .find(|&(_, c)| !is_identifier_char(c))
        .map_or(text.len(), |(i, _)| i)
}

/// A token sequence together with the texts of its tokens.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    pub tokens: Vec<TokenId>,
    pub texts: Vec<String>,
}

impl TokenSeq {
    pub fn from_ids(vocab: &Vocabulary, tokens: Vec<TokenId>) -> Self {
        let texts = tokens.iter().map(|&t| vocab.text(t).to_string()).collect();
        Self { tokens, texts }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.texts.concat()
    }
}
