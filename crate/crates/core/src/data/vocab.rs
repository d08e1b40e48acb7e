use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::corpus::CorpusRecord;
use super::text::tokenize;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: usize = 4;

const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    tokens: Vec<String>,
    min_freq: usize,
}

/// Word vocabulary. Ids `0..4` are reserved; token `tokens[i]` has id `i + 4`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_freq: usize,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i + RESERVED).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            min_freq,
        })
    }

    /// Counts question and answer tokens; keeps those seen at least
    /// `min_freq` times, ordered by descending count then lexicographically.
    pub fn build(train: &[CorpusRecord], min_freq: usize) -> Result<Self> {
        if min_freq == 0 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        if train.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for r in train {
            for t in tokenize(&r.question).into_iter().chain(tokenize(&r.answer)) {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t).collect(), min_freq)
    }

    pub fn len(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        match id {
            i if i < RESERVED => RESERVED_TOKENS[i],
            i => self.tokens.get(i - RESERVED).map_or("<unk>", String::as_str),
        }
    }

    /// Token ids of `text` truncated to `max_len - 1` content tokens, then EOS.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        let keep = max_len.saturating_sub(1).max(1);
        let mut ids: Vec<usize> = tokenize(text).iter().take(keep).map(|t| self.id(t)).collect();
        ids.push(EOS);
        ids
    }

    /// Content tokens up to the first EOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    /// Hex SHA-256 over the ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            tokens: self.tokens.clone(),
            min_freq: self.min_freq,
        };
        serde_json::to_string(&file).expect("vocabulary serializes")
    }

    pub fn from_json(raw: &str, context: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(raw).map_err(|e| Error::json(context, e))?;
        Self::from_tokens(file.tokens, file.min_freq)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&raw, &path.display().to_string())
    }
}
