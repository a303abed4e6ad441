use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercases and splits on anything that is not alphanumeric.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    pub min_freq: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub original_text: String,
}

#[derive(Clone, Serialize, Deserialize)]
struct VocabFile {
    min_freq: usize,
    tokens: indexmap::IndexMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, ids, min_freq }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Hex SHA-256 over the tokens in id order; stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        let tokens = v.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        VocabFile { min_freq: v.min_freq, tokens }
    }
}

impl TryFrom<VocabFile> for Vocab {
    type Error = Error;

    fn try_from(file: VocabFile) -> Result<Self> {
        let mut tokens = vec![None; file.tokens.len()];
        for (token, id) in file.tokens {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| Error::InvalidInput(format!("vocab id {id} is not contiguous")))?;
            if slot.replace(token).is_some() {
                return Err(Error::InvalidInput(format!("vocab id {id} assigned twice")));
            }
        }
        let tokens: Vec<String> = tokens
            .into_iter()
            .collect::<Option<_>>()
            .ok_or_else(|| Error::InvalidInput("vocab ids are not contiguous".into()))?;
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN) || tokens.get(1).map(String::as_str) != Some(UNK_TOKEN) {
            return Err(Error::InvalidInput("vocab must reserve id 0 for <pad> and 1 for <unk>".into()));
        }
        Ok(Vocab::from_tokens(tokens, file.min_freq))
    }
}

/// Tokens with `count ≥ min_freq`, ordered by descending count then lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for caption in corpus {
        for w in words(caption.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq.max(1)).collect();
    kept.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));
    let tokens = [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()].into_iter().chain(kept.into_iter().map(|(t, _)| t)).collect();
    Ok(Vocab::from_tokens(tokens, min_freq))
}

/// Unknown words map to UNK; text without words becomes `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocab) -> TokenSequence {
    let mut ids: Vec<u32> = words(text).map(|w| vocab.id(&w).unwrap_or(UNK)).collect();
    if ids.is_empty() {
        ids.push(UNK);
    }
    TokenSequence { ids, original_text: text.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_ordering_and_threshold() {
        let corpus = ["a red car", "a red bus"];
        let v = build_vocab(&corpus, 1).unwrap();
        let order: Vec<&str> = (0..v.len() as u32).map(|i| v.token(i).unwrap()).collect();
        assert_eq!(order, [PAD_TOKEN, UNK_TOKEN, "a", "red", "bus", "car"]);
        assert_eq!(build_vocab(&corpus, 3).unwrap().len(), 2);
        assert_eq!(build_vocab(&corpus, 1).unwrap(), v);
        assert!(build_vocab::<&str>(&[], 1).is_err());
    }

    #[test]
    fn tokenize_examples() {
        let v = build_vocab(&["a red car", "a red bus"], 1).unwrap();
        assert_eq!(tokenize("A red CAR", &v).ids, vec![2, 3, 5]);
        assert_eq!(tokenize("zzz qqq", &v).ids, vec![UNK, UNK]);
        assert_eq!(tokenize("", &v).ids, vec![UNK]);
        assert_eq!(tokenize("a red, car!", &v).ids, vec![2, 3, 5]);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let v = build_vocab(&["the blue bird sings", "a blue sky"], 1).unwrap();
        let back = Vocab::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.fingerprint(), v.fingerprint());
        assert!(Vocab::from_json(r#"{"min_freq":1,"tokens":{"<pad>":0,"x":2}}"#).is_err());
        assert!(Vocab::from_json(r#"{"min_freq":1,"tokens":{"x":0,"<unk>":1}}"#).is_err());
    }

    #[test]
    fn every_training_caption_maps_inside_the_vocab() {
        let corpus = ["Two dogs, one cat.", "a GREEN door", "x-ray of a hand"];
        let v = build_vocab(&corpus, 1).unwrap();
        for c in corpus {
            assert!(tokenize(c, &v).ids.iter().all(|&id| (id as usize) < v.len() && id != UNK));
        }
    }
}
