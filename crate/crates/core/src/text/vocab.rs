use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Word vocabulary. Ids 0 and 1 are reserved for padding and unknown words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    #[serde(skip)]
    token_to_id: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Vocabulary {
            id_to_token: Vec::new(),
            token_to_id: HashMap::new(),
        };
        v.push(PAD_TOKEN);
        v.push(UNK_TOKEN);
        v
    }

    fn push(&mut self, token: &str) -> usize {
        let id = self.id_to_token.len();
        self.id_to_token.push(token.to_string());
        self.token_to_id.insert(token.to_string(), id);
        id
    }

    /// Returns the id of `token`, adding it if absent.
    pub fn add(&mut self, token: &str) -> usize {
        match self.token_to_id.get(token) {
            Some(&id) => id,
            None => self.push(token),
        }
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        self.id_to_token.get(id).map_or(UNK_TOKEN, |s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Rebuilds the reverse map after deserialization.
    pub fn reindex(&mut self) {
        self.token_to_id = self
            .id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    /// Stable digest of the id assignment, stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.id_to_token {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Character inventory: printable ASCII plus whatever the training corpus
/// adds. Same reserved ids as [`Vocabulary`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharVocab {
    chars: Vec<char>,
    #[serde(skip)]
    char_to_id: HashMap<char, usize>,
}

impl Default for CharVocab {
    fn default() -> Self {
        Self::ascii()
    }
}

impl CharVocab {
    /// Printable ASCII only.
    pub fn ascii() -> Self {
        let mut v = CharVocab {
            chars: Vec::new(),
            char_to_id: HashMap::new(),
        };
        for c in ' '..='~' {
            v.add(c);
        }
        v
    }

    pub fn add(&mut self, c: char) -> usize {
        if let Some(&id) = self.char_to_id.get(&c) {
            return id;
        }
        self.chars.push(c);
        let id = self.chars.len() + 1;
        self.char_to_id.insert(c, id);
        id
    }

    pub fn extend_from<'a>(&mut self, tokens: impl IntoIterator<Item = &'a str>) {
        for t in tokens {
            for c in t.chars() {
                self.add(c);
            }
        }
    }

    pub fn id(&self, c: char) -> usize {
        self.char_to_id.get(&c).copied().unwrap_or(UNK_ID)
    }

    /// Character ids of `token`, truncated to `max_chars`.
    pub fn encode(&self, token: &str, max_chars: usize) -> Vec<usize> {
        token.chars().take(max_chars).map(|c| self.id(c)).collect()
    }

    /// Number of rows needed in a character table, reserved ids included.
    pub fn len(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn reindex(&mut self) {
        self.char_to_id = self.chars.iter().enumerate().map(|(i, &c)| (c, i + 2)).collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids() {
        let mut v = Vocabulary::new();
        assert_eq!(v.id(PAD_TOKEN), PAD_ID);
        assert_eq!(v.id("never-seen"), UNK_ID);
        let a = v.add("a");
        assert_eq!(a, 2);
        assert_eq!(v.add("a"), 2);
        assert_eq!(v.token(a), "a");
    }

    #[test]
    fn bijection_survives_serde() {
        let mut v = Vocabulary::new();
        for t in ["x", "y", "z"] {
            v.add(t);
        }
        let mut back: Vocabulary = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        back.reindex();
        for id in 0..v.len() {
            assert_eq!(back.id(v.token(id)), id);
        }
        assert_eq!(back.fingerprint(), v.fingerprint());
    }

    #[test]
    fn char_vocab_seeds_ascii() {
        let mut cv = CharVocab::ascii();
        assert_eq!(cv.len(), 95 + 2);
        assert_eq!(cv.id(' '), 2);
        assert_eq!(cv.id('é'), UNK_ID);
        cv.extend_from(["café"]);
        assert_ne!(cv.id('é'), UNK_ID);
        assert_eq!(cv.encode("abcdef", 3).len(), 3);
        let mut back: CharVocab = serde_json::from_str(&serde_json::to_string(&cv).unwrap()).unwrap();
        back.reindex();
        assert_eq!(back.id('é'), cv.id('é'));
    }
}
