//! Word-level vocabulary with a fixed reserved-id layout.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const CLS_ID: TokenId = 2;
pub const SEP_ID: TokenId = 3;
pub const MASK_ID: TokenId = 4;
/// Number of reserved ids; the first ordinary token gets this id.
pub const NUM_RESERVED: usize = 5;

pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

pub fn is_reserved(id: TokenId) -> bool {
    (id as usize) < NUM_RESERVED
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

/// Lowercases and splits into runs of alphanumerics; every other
/// non-whitespace character becomes its own token.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

impl Vocab {
    /// Builds a vocabulary from ordinary tokens, which receive ids from 5 on.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (id, tok) in all.iter().enumerate() {
            if index.insert(tok.clone(), id as TokenId).is_some() {
                return Err(Error::Invalid(format!("duplicate vocab token {tok:?}")));
            }
        }
        Ok(Vocab { tokens: all, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        pre_tokenize(text)
            .iter()
            .map(|t| match self.index.get(t.as_str()) {
                Some(&id) if !is_reserved(id) => id,
                _ => UNK_ID,
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or(Error::IdOutOfRange {
                id,
                size: self.size(),
            })?;
            parts.push(tok);
        }
        Ok(parts.join(" "))
    }

    /// One token per line, reserved entries first, so line number equals id.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        for tok in &self.tokens {
            writeln!(out, "{tok}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        self.write(std::io::BufWriter::new(file))
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < NUM_RESERVED {
            return Err(Error::malformed(source, "vocab file is missing reserved entries"));
        }
        for (i, expected) in RESERVED_TOKENS.iter().enumerate() {
            if lines[i] != *expected {
                return Err(Error::malformed(
                    format!("{source}:{}", i + 1),
                    format!("expected reserved token {expected}, found {:?}", lines[i]),
                ));
            }
        }
        Self::from_tokens(lines[NUM_RESERVED..].iter().copied())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        Self::parse(&fs::read_to_string(path)?, &path.display().to_string())
    }
}

/// Frequency-ranked vocabulary (ties broken lexicographically), capped at
/// `max_size` entries including the reserved ones.
pub fn build_vocab(corpus: &Corpus, max_size: usize, min_freq: usize) -> Result<Vocab> {
    if max_size < NUM_RESERVED + 1 {
        return Err(Error::InvalidConfig(format!(
            "vocab max_size must be at least {}, got {max_size}",
            NUM_RESERVED + 1
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for s in corpus.iter_sentences() {
        for tok in pre_tokenize(&s.text) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq && !RESERVED_TOKENS.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - NUM_RESERVED);
    Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t))
}
