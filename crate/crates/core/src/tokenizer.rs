//! Word-level vocabulary with a fixed block of reserved atoms.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const QRY: usize = 3;
pub const SEP: usize = 4;
pub const SUM: usize = 5;
pub const EOS: usize = 6;
pub const TAB: usize = 7;
pub const HDR: usize = 8;
pub const ROW: usize = 9;
pub const PIPE: usize = 10;

/// Reserved atoms, in id order.
pub const RESERVED: [&str; 11] = ["[PAD]", "[UNK]", "[MASK]", "[QRY]", "[SEP]", "[SUM]", "[EOS]", "[TAB]", "[HDR]", "[ROW]", "|"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    atoms: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved atoms followed by every other word of `texts`, sorted.
    pub fn build<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut words = BTreeSet::new();
        for text in texts {
            for w in text.split_whitespace() {
                if !RESERVED.contains(&w) {
                    words.insert(w.to_string());
                }
            }
        }
        let atoms = RESERVED.iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_atoms(atoms).expect("reserved prefix is present")
    }

    pub fn from_atoms(atoms: Vec<String>) -> Result<Self> {
        if atoms.len() < RESERVED.len() || atoms.iter().zip(RESERVED).any(|(a, r)| a != r) {
            return Err(Error::VocabMismatch("reserved atoms must occupy ids 0..10 in order".into()));
        }
        let mut index = HashMap::with_capacity(atoms.len());
        for (i, a) in atoms.iter().enumerate() {
            if a.is_empty() || a.chars().any(char::is_whitespace) {
                return Err(Error::VocabMismatch(format!("atom {i} is empty or contains whitespace")));
            }
            if index.insert(a.clone(), i).is_some() {
                return Err(Error::VocabMismatch(format!("duplicate atom {a:?}")));
            }
        }
        Ok(Vocab { atoms, index })
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn atom(&self, id: usize) -> Option<&str> {
        self.atoms.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&id| self.atom(id).ok_or(Error::TokenOutOfRange { id, size: self.len() }))
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    /// One atom per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.atoms.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_atoms(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the vocabulary file contents.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reserved_only() {
        let v = Vocab::build(["[QRY] [SEP] | [EOS]"]);
        assert_eq!(v.len(), 11);
        assert_eq!(v.decode(&[0]).unwrap(), "[PAD]");
        assert_eq!(v.id("|"), Some(PIPE));
    }

    #[test]
    fn new_words_sort_after_reserved() {
        let v = Vocab::build(["zeta age", "the"]);
        assert_eq!(v.id("age"), Some(11));
        assert_eq!(v.id("the"), Some(12));
        assert_eq!(v.id("zeta"), Some(13));
        assert_eq!(Vocab::build(["zeta age", "the"]), v);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocab::build(["a b c"]);
        assert_eq!(v.encode("a x c"), vec![v.id("a").unwrap(), UNK, v.id("c").unwrap()]);
    }

    #[test]
    fn decode_out_of_range_errors() {
        let v = Vocab::build(["a"]);
        assert!(matches!(v.decode(&[99]), Err(Error::TokenOutOfRange { id: 99, .. })));
    }

    #[test]
    fn text_file_round_trip() {
        let v = Vocab::build(["the age of patient_7 is 42 ."]);
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocab::from_text("a\nb\n").is_err());
    }

    proptest! {
        #[test]
        fn in_vocab_round_trip(words in proptest::collection::vec("[a-z_0-9]{1,6}", 0..20)) {
            let text = words.join(" ");
            let v = Vocab::build([text.as_str()]);
            let ids = v.encode(&text);
            prop_assert_eq!(ids.len(), words.len());
            prop_assert_eq!(v.decode(&ids).unwrap(), text);
        }
    }
}
