use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::Sentence;
use crate::error::{Error, Result};
use crate::layers::{PAD_ROW, UNK_ROW};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Case-folded token vocabulary. Row 0 is padding and row 1 the unknown token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Every distinct case-folded token, in first-seen order.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a Sentence>) -> Self {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut index: BTreeMap<String, usize> = BTreeMap::from([
            (PAD_TOKEN.to_string(), PAD_ROW),
            (UNK_TOKEN.to_string(), UNK_ROW),
        ]);
        for s in sentences {
            for t in &s.tokens {
                let key = t.to_lowercase();
                if !index.contains_key(&key) {
                    index.insert(key.clone(), tokens.len());
                    tokens.push(key);
                }
            }
        }
        Self { tokens, index }
    }

    /// Rebuilds a vocabulary from its token list; the first two entries must
    /// be the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ROW] != PAD_TOKEN || tokens[UNK_ROW] != UNK_TOKEN {
            return Err(Error::Config(format!(
                "vocabulary must start with `{PAD_TOKEN}` and `{UNK_TOKEN}`"
            )));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("token `{t}` listed twice")));
            }
        }
        Ok(Self { tokens, index })
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

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(&token.to_lowercase()).copied()
    }

    /// Row index for a token, falling back to the unknown row.
    pub fn index(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_ROW)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.index(t)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(&self.tokens)?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_tokens(serde_json::from_str(&text)?)
    }
}
