//! Whitespace and punctuation tokenizer with a vocabulary learned from report text.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedText {
    pub token_ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub pad_id: u32,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of real (unmasked) tokens.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Seam for swapping in a pretrained tokenizer.
pub trait Tokenizer: Send + Sync {
    fn token_ids(&self, text: &str) -> Vec<u32>;
    fn vocab_size(&self) -> usize;
    fn pad_id(&self) -> u32;

    /// Truncate to `max_len` and pad with the pad id.
    fn tokenize(&self, text: &str, max_len: usize) -> Result<TokenizedText> {
        if max_len == 0 {
            return Err(Error::Text("max_len must be positive".into()));
        }
        let mut ids = self.token_ids(text);
        if ids.is_empty() {
            return Err(Error::Text("empty text".into()));
        }
        ids.truncate(max_len);
        let real = ids.len();
        ids.resize(max_len, self.pad_id());
        let mut mask = vec![1u8; real];
        mask.resize(max_len, 0);
        Ok(TokenizedText {
            token_ids: ids,
            attention_mask: mask,
            pad_id: self.pad_id(),
        })
    }
}

/// Lowercase words (letters, digits, inner `-` and `'`) and single punctuation marks.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() || (!cur.is_empty() && (c == '-' || c == '\'')) {
            cur.extend(c.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordTokenizer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl WordTokenizer {
    /// Ids 0 and 1 are reserved for `[PAD]` and `[UNK]`; the rest follow `words` order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut tokens = vec![PAD.to_string(), UNK.to_string()];
        for w in words {
            if w != PAD && w != UNK && !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    /// Vocabulary of every token seen at least `min_count` times, sorted for stable ids.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I, min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in split_words(t) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        Self::from_tokens(
            counts
                .into_iter()
                .filter(|(_, c)| *c >= min_count.max(1))
                .map(|(w, _)| w),
        )
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// One `id<TAB>token` line per entry.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body: String = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{i}\t{t}\n"))
            .collect();
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let (id, tok) = line
                .split_once('\t')
                .ok_or_else(|| Error::Text(format!("vocab line {n}: expected id<TAB>token")))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Text(format!("vocab line {n}: bad id `{id}`")))?;
            entries.push((id, tok.to_string()));
        }
        entries.sort();
        if entries.iter().enumerate().any(|(i, (id, _))| i != *id) {
            return Err(Error::Text("vocab ids must be contiguous from 0".into()));
        }
        if entries.len() < 2 || entries[0].1 != PAD || entries[1].1 != UNK {
            return Err(Error::Text("vocab must start with [PAD] and [UNK]".into()));
        }
        Ok(Self::from_tokens(entries.into_iter().map(|(_, t)| t)))
    }
}

impl Tokenizer for WordTokenizer {
    fn token_ids(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .into_iter()
            .map(|w| self.index.get(&w).copied().unwrap_or(1))
            .collect()
    }

    fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    fn pad_id(&self) -> u32 {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed() -> WordTokenizer {
        WordTokenizer::from_tokens(["no", "consolidation", ".", "there", "is"].map(String::from))
    }

    #[test]
    fn splits_punctuation() {
        assert_eq!(
            split_words("No consolidation. Ground-glass, seen!"),
            vec!["no", "consolidation", ".", "ground-glass", ",", "seen", "!"]
        );
    }

    #[test]
    fn fixed_vocab_oracle() {
        let tok = fixed();
        let t = tok.tokenize("no consolidation.", 6).unwrap();
        // ids follow insertion order after the two specials
        assert_eq!(t.token_ids, vec![2, 3, 4, 0, 0, 0]);
        assert_eq!(t.attention_mask, vec![1, 1, 1, 0, 0, 0]);
        assert_eq!(tok.tokenize("pneumothorax", 2).unwrap().token_ids, vec![1, 0]);
    }

    #[test]
    fn exact_length_has_no_pads() {
        let t = fixed().tokenize("there is no consolidation .", 5).unwrap();
        assert_eq!(t.attention_mask, vec![1; 5]);
    }

    #[test]
    fn truncates_to_512() {
        let text = vec!["no"; 600].join(" ");
        let t = fixed().tokenize(&text, 512).unwrap();
        assert_eq!(t.len(), 512);
        assert_eq!(t.real_len(), 512);
    }

    #[test]
    fn empty_text_rejected() {
        assert!(fixed().tokenize("", 8).is_err());
        assert!(fixed().tokenize("   ", 8).is_err());
    }

    #[test]
    fn built_vocab_round_trips() {
        let tok = WordTokenizer::build(["Lung nodule is seen.", "No lung nodule."], 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        tok.write(&p).unwrap();
        assert_eq!(WordTokenizer::read(&p).unwrap(), tok);
        assert_eq!(tok.id("[PAD]"), Some(0));
        assert!(tok.id("nodule").is_some());
    }
}
