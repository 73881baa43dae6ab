use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::AlignmentError;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

/// Lowercased whitespace words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Vocab {
    /// Specials first (`<s>`, `</s>`, `<unk>`), then the sorted distinct words.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        let tokens = [BOS, EOS, UNK]
            .into_iter()
            .map(str::to_owned)
            .chain(words.into_iter().filter(|w| ![BOS, EOS, UNK].contains(&w.as_str())))
            .collect();
        Self::from_tokens(tokens).expect("built vocabulary is valid")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, AlignmentError> {
        let mut lookup = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if lookup.insert(t.clone(), i as u32).is_some() {
                return Err(AlignmentError::BadVocab(format!("duplicate token {t:?}")));
            }
        }
        for special in [BOS, EOS, UNK] {
            if !lookup.contains_key(special) {
                return Err(AlignmentError::BadVocab(format!("missing {special}")));
            }
        }
        Ok(Self { tokens, lookup })
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

    pub fn id(&self, token: &str) -> Option<u32> {
        self.lookup.get(token).copied()
    }

    pub fn bos(&self) -> u32 {
        self.lookup[BOS]
    }

    pub fn eos(&self) -> u32 {
        self.lookup[EOS]
    }

    pub fn unk(&self) -> u32 {
        self.lookup[UNK]
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Token ids of `text`; unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text)
            .iter()
            .map(|w| self.id(w).unwrap_or_else(|| self.unk()))
            .collect()
    }

    /// Like [`encode`](Self::encode) with `</s>` appended.
    pub fn encode_completion(&self, text: &str) -> Vec<u32> {
        let mut ids = self.encode(text);
        ids.push(self.eos());
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i != self.eos() && i != self.bos())
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = AlignmentError;

    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}
