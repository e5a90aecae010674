use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const MASK: &str = "[MASK]";
pub const UNK: &str = "[UNK]";

pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const N_RESERVED: usize = 3;

/// Whitespace tokenizer over a fixed word list. Ids 0..3 are reserved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = vec![PAD.into(), MASK.into(), UNK.into()];
        all.extend(words.into_iter().map(Into::into));
        Vocab::try_from(all)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn is_reserved(id: usize) -> bool {
        id < N_RESERVED
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        if words.len() < N_RESERVED || words[PAD_ID] != PAD || words[MASK_ID] != MASK || words[UNK_ID] != UNK {
            return Err(Error::Data("vocabulary must start with [PAD] [MASK] [UNK]".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid vocabulary entry {:?}", w)));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {:?}", w)));
            }
        }
        Ok(Vocab { words, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_lookup() {
        let v = Vocab::new(["dog", "cat"]).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id(PAD), PAD_ID);
        assert_eq!(v.id(MASK), MASK_ID);
        assert_eq!(v.id("cat"), 4);
        assert_eq!(v.id("zebra"), UNK_ID);
        assert_eq!(v.encode("dog  zebra cat"), vec![3, UNK_ID, 4]);
        assert_eq!(v.decode(&[3, 1]), "dog [MASK]");
    }

    #[test]
    fn duplicates_rejected() {
        assert!(Vocab::new(["a", "a"]).is_err());
        assert!(Vocab::new(["[MASK]"]).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocab::new(["x", "y"]).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&s).unwrap();
        assert_eq!(v, back);
    }
}
