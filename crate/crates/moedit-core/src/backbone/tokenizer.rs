use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

/// Reserved special token ids.
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Word-level tokenizer over a closed synthetic vocabulary.
///
/// Text is whitespace-split; unknown words map to `<unk>`. The word list
/// is stored sorted so the id assignment is independent of the order the
/// corpus enumerates words in.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tokenizer {
    words: Vec<String>,
    #[cfg_attr(feature = "serde", serde(skip))]
    index: BTreeMap<String, u32>,
}

impl Tokenizer {
    pub fn from_words<I, S>(words: I) -> Tokenizer
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut list: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut rest: Vec<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        rest.sort_unstable();
        rest.dedup();
        list.extend(rest);
        let mut tok = Tokenizer {
            words: list,
            index: BTreeMap::new(),
        };
        tok.rebuild_index();
        tok
    }

    /// Rebuild the word -> id map; needed after deserializing.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.word_id(w).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let parts: Vec<&str> = ids
            .iter()
            .map(|&id| {
                self.words
                    .get(id as usize)
                    .map(|s| s.as_str())
                    .unwrap_or("<unk>")
            })
            .collect();
        parts.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn encode_empty_is_empty() {
        let tok = Tokenizer::from_words(["a", "b"]);
        assert_eq!(tok.encode(""), Vec::<u32>::new());
    }

    #[test]
    fn encode_decode_roundtrip_in_vocab() {
        let tok = Tokenizer::from_words(["capital", "of", "agra"]);
        let ids = tok.encode("capital of agra");
        assert_eq!(
            ids,
            vec![
                tok.word_id("capital").unwrap(),
                tok.word_id("of").unwrap(),
                tok.word_id("agra").unwrap()
            ]
        );
        assert_eq!(tok.decode(&ids), "capital of agra");
    }

    #[test]
    fn out_of_vocab_maps_to_unk() {
        let tok = Tokenizer::from_words(["a"]);
        assert_eq!(tok.encode("zzz"), vec![UNK]);
    }

    #[test]
    fn ids_are_stable_under_input_order() {
        let a = Tokenizer::from_words(["x", "y", "z"]);
        let b = Tokenizer::from_words(["z", "x", "y", "x"]);
        assert_eq!(a.words(), b.words());
    }
}
