use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::RelationInstance;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Marker for the position after the last character in bigram keys.
pub const END: &str = "</s>";

/// Bidirectional token/id map. Ids are assigned in first-insertion order
/// after any reserved slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn new() -> Self {
        Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Vocabulary with the PAD and UNK slots at ids 0 and 1.
    pub fn with_pad_unk() -> Self {
        Vocab::from(vec!["<pad>".to_string(), "<unk>".to_string()])
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or UNK. Only meaningful for PAD/UNK vocabularies.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
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
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

pub fn bigram_key(chars: &[char], i: usize) -> String {
    let mut s = String::new();
    s.push(chars[i]);
    match chars.get(i + 1) {
        Some(&c) => s.push(c),
        None => s.push_str(END),
    }
    s
}

/// Character, bigram and label vocabularies built from a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub chars: Vocab,
    pub bigrams: Vocab,
    pub labels: Vocab,
}

impl Vocabularies {
    pub fn build(train: &[RelationInstance]) -> Self {
        let mut chars = Vocab::with_pad_unk();
        let mut bigrams = Vocab::with_pad_unk();
        let mut labels = Vocab::new();
        let mut buf = [0u8; 4];
        for inst in train {
            for (i, c) in inst.chars.iter().enumerate() {
                chars.insert(c.encode_utf8(&mut buf));
                bigrams.insert(&bigram_key(&inst.chars, i));
            }
            labels.insert(&inst.relation);
        }
        Vocabularies {
            chars,
            bigrams,
            labels,
        }
    }

    pub fn char_id(&self, c: char) -> usize {
        let mut buf = [0u8; 4];
        self.chars.id_or_unk(c.encode_utf8(&mut buf))
    }

    pub fn label_id(&self, label: &str) -> Result<usize> {
        self.labels
            .get(label)
            .ok_or_else(|| Error::Validation(format!("relation `{label}` not in label inventory")))
    }

    pub fn label(&self, id: usize) -> &str {
        self.labels.token(id).unwrap_or("<invalid>")
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }
}
