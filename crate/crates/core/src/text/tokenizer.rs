use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub const DEFAULT_VOCAB_CAP: usize = 4096;

/// Lowercases and splits on whitespace; every other non-alphanumeric
/// character becomes a token of its own.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Canonical text form: the split tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    split_words(text).join(" ")
}

/// Closed word-level vocabulary with four reserved ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    reserved: BTreeMap<String, u32>,
    tokens: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from raw texts, most frequent words first (ties
    /// alphabetical), truncated so the total size including reserved ids is
    /// at most `cap`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, cap: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in split_words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let keep = cap.saturating_sub(RESERVED.len());
        Self::from_tokens(words.into_iter().take(keep).map(|(w, _)| w))
    }

    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut token_to_id = HashMap::new();
        for t in tokens {
            if token_to_id.contains_key(&t) || RESERVED.contains(&t.as_str()) {
                continue;
            }
            token_to_id.insert(t.clone(), id_to_token.len() as u32);
            id_to_token.push(t);
        }
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        self.id_to_token
            .get(id as usize)
            .map_or(RESERVED[UNK as usize], String::as_str)
    }

    pub fn is_special(id: u32) -> bool {
        id <= UNK
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile {
            reserved: RESERVED
                .iter()
                .enumerate()
                .map(|(i, s)| (s.to_string(), i as u32))
                .collect(),
            tokens: self.token_to_id.iter().map(|(k, &v)| (k.clone(), v)).collect(),
        };
        fsutil::write_atomic(path, serde_json::to_string_pretty(&file)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(&fsutil::read_to_string(path)?)?;
        for (i, name) in RESERVED.iter().enumerate() {
            if file.reserved.get(*name) != Some(&(i as u32)) {
                return Err(Error::Config(format!("vocabulary header must map {name} to {i}")));
            }
        }
        let mut by_id: Vec<(u32, String)> = file.tokens.into_iter().map(|(k, v)| (v, k)).collect();
        by_id.sort();
        for (expected, (id, tok)) in by_id.iter().enumerate() {
            if *id as usize != expected + RESERVED.len() {
                return Err(Error::Config(format!("vocabulary ids are not contiguous at {tok:?}")));
            }
        }
        Ok(Self::from_tokens(by_id.into_iter().map(|(_, t)| t)))
    }
}

/// Token ids plus a mask that is `false` on the (left) padding prefix.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<u32>,
    mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, mask: Vec<bool>) -> Result<Self> {
        if ids.len() != mask.len() {
            return Err(Error::contract("ids and mask differ in length"));
        }
        if mask.windows(2).any(|w| w[0] && !w[1]) {
            return Err(Error::contract("padding must be a contiguous prefix"));
        }
        Ok(TokenSequence { ids, mask })
    }

    /// A sequence with no padding.
    pub fn from_ids(ids: Vec<u32>) -> Self {
        let mask = vec![true; ids.len()];
        TokenSequence { ids, mask }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn pad_count(&self) -> usize {
        self.mask.iter().take_while(|m| !**m).count()
    }

    /// The ids after the padding prefix.
    pub fn real_ids(&self) -> &[u32] {
        &self.ids[self.pad_count()..]
    }

    /// Left-pads to `len`; longer sequences are returned unchanged.
    pub fn left_padded(&self, len: usize) -> Self {
        let extra = len.saturating_sub(self.ids.len());
        let mut ids = vec![PAD; extra];
        ids.extend_from_slice(&self.ids);
        let mut mask = vec![false; extra];
        mask.extend_from_slice(&self.mask);
        TokenSequence { ids, mask }
    }
}

/// Word-level encoding, truncated to the first `max_len` tokens and, with
/// `pad`, left-padded to exactly `max_len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize, pad: bool) -> TokenSequence {
    assert!(max_len >= 1, "max_len must be positive");
    let ids: Vec<u32> = split_words(text)
        .iter()
        .take(max_len)
        .map(|w| vocab.id(w))
        .collect();
    let seq = TokenSequence::from_ids(ids);
    if pad {
        seq.left_padded(max_len)
    } else {
        seq
    }
}

/// Joins the non-special tokens with single spaces.
pub fn detokenize(ids: &[u32], vocab: &Vocabulary) -> String {
    ids.iter()
        .filter(|&&id| !Vocabulary::is_special(id) || id == UNK)
        .map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Model input for a prompt: `BOS` followed by at most `max_len - 1`
/// tokens, optionally left-padded to `max_len`.
pub fn encode_prompt(text: &str, vocab: &Vocabulary, max_len: usize, pad: bool) -> TokenSequence {
    let body = tokenize(text, vocab, max_len.saturating_sub(1).max(1), false);
    let mut ids = vec![BOS];
    ids.extend_from_slice(body.ids());
    ids.truncate(max_len);
    let seq = TokenSequence::from_ids(ids);
    if pad {
        seq.left_padded(max_len)
    } else {
        seq
    }
}
