use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AplError, Result};

pub type TokenId = u32;

/// Dense token vocabulary with designated BOS and EOS entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    bos: TokenId,
    eos: TokenId,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, bos: TokenId, eos: TokenId) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(AplError::invalid("vocabulary needs at least two tokens"));
        }
        let v = tokens.len() as TokenId;
        if bos >= v || eos >= v {
            return Err(AplError::invalid("BOS/EOS index outside vocabulary"));
        }
        if bos == eos {
            return Err(AplError::invalid("BOS and EOS must be distinct tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(AplError::invalid(format!("token {i} is empty or contains whitespace")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(AplError::invalid(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, bos, eos, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Maps a whitespace-separated line through the vocabulary.
    pub fn encode(&self, line: &str) -> Result<TokenSequence> {
        let tokens = line
            .split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| AplError::invalid(format!("token `{w}` not in vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        let terminated = tokens.last() == Some(&self.eos);
        Ok(TokenSequence { tokens, terminated })
    }

    pub fn decode(&self, seq: &[TokenId]) -> String {
        seq.iter()
            .map(|&t| self.token(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Renders text for display, dropping BOS/EOS markers.
    pub fn detokenize(&self, seq: &[TokenId]) -> String {
        seq.iter()
            .filter(|&&t| t != self.bos && t != self.eos)
            .map(|&t| self.token(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw: Vocabulary = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Vocabulary::new(raw.tokens, raw.bos, raw.eos)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// A run of token ids. `terminated` marks a completion that ended, either by
/// emitting EOS or by reaching the token limit. It is informational only: it is
/// not serialized and does not take part in comparisons.
#[derive(Debug, Clone, Default)]
pub struct TokenSequence {
    pub tokens: Vec<TokenId>,
    pub terminated: bool,
}

impl PartialEq for TokenSequence {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Eq for TokenSequence {}

impl std::hash::Hash for TokenSequence {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.tokens.hash(state)
    }
}

impl PartialOrd for TokenSequence {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TokenSequence {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.tokens.cmp(&other.tokens)
    }
}

impl TokenSequence {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self { tokens, terminated: false }
    }

    pub fn terminated(tokens: Vec<TokenId>) -> Self {
        Self { tokens, terminated: true }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn as_slice(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn check(&self, vocab_size: usize) -> Result<()> {
        if let Some(&t) = self.tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(AplError::invalid(format!(
                "token {t} out of vocabulary of size {vocab_size}"
            )));
        }
        Ok(())
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(tokens: Vec<TokenId>) -> Self {
        Self::new(tokens)
    }
}

// Sequences go over the wire as plain integer arrays.
impl Serialize for TokenSequence {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for TokenSequence {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Vec::<TokenId>::deserialize(d).map(TokenSequence::new)
    }
}

/// Reads a corpus file: one whitespace-tokenized sequence per line, blank lines skipped.
pub fn read_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<TokenSequence>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            vocab.encode(l).map_err(|e| {
                AplError::invalid(format!("{}:{}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

pub fn write_corpus(path: &Path, vocab: &Vocabulary, seqs: &[TokenSequence]) -> Result<()> {
    let mut out = String::new();
    for s in seqs {
        out.push_str(&vocab.decode(&s.tokens));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
