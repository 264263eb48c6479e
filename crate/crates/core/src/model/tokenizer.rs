//! Word-level tokenizer with a word-boundary marker and character fallback.
//!
//! Text is split into runs of alphanumeric characters and single
//! punctuation characters. A piece preceded by a space carries a leading
//! `▁`; the start of every text counts as preceded by a space, so `"a b"`
//! becomes `["▁a", "▁b"]`. Pieces missing from the vocabulary fall back to
//! `▁` plus one token per character; characters never seen at build time map
//! to `<unk>`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPACE_MARK: char = '\u{2581}';
pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

/// Splits text into marked pieces. Exposed for vocabulary statistics.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut pieces = Vec::new();
    let mut pending_space = true;
    let mut word = String::new();
    let flush_word = |word: &mut String, pieces: &mut Vec<String>, pending: &mut bool| {
        if !word.is_empty() {
            let mut piece = String::new();
            if *pending {
                piece.push(SPACE_MARK);
            }
            piece.push_str(word);
            pieces.push(piece);
            word.clear();
            *pending = false;
        }
    };
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        flush_word(&mut word, &mut pieces, &mut pending_space);
        if ch == ' ' {
            if pending_space {
                pieces.push(SPACE_MARK.to_string());
            }
            pending_space = true;
        } else if ch.is_whitespace() {
            if pending_space {
                pieces.push(SPACE_MARK.to_string());
            }
            pieces.push(ch.to_string());
            pending_space = false;
        } else {
            let mut piece = String::new();
            if pending_space {
                piece.push(SPACE_MARK);
            }
            piece.push(ch);
            pieces.push(piece);
            pending_space = false;
        }
    }
    flush_word(&mut word, &mut pieces, &mut pending_space);
    if pending_space && !text.is_empty() {
        pieces.push(SPACE_MARK.to_string());
    }
    pieces
}

impl Tokenizer {
    pub const PAD_ID: usize = 0;
    pub const BOS_ID: usize = 1;
    pub const EOS_ID: usize = 2;
    pub const UNK_ID: usize = 3;

    /// Builds a vocabulary: specials, then pieces by descending frequency
    /// (ties lexicographic), then every remaining single character.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut chars: BTreeMap<String, ()> = BTreeMap::new();
        for text in corpus {
            for piece in pre_tokenize(text.as_ref()) {
                *counts.entry(piece).or_insert(0) += 1;
            }
            for ch in text.as_ref().chars().filter(|c| *c != ' ') {
                chars.insert(ch.to_string(), ());
            }
        }
        let mut pieces: Vec<(String, usize)> = counts.into_iter().collect();
        pieces.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        tokens.extend(pieces.into_iter().map(|(p, _)| p));
        tokens.push(SPACE_MARK.to_string());
        tokens.extend(chars.into_keys());
        let mut seen = std::collections::HashSet::new();
        tokens.retain(|t| seen.insert(t.clone()));
        Ok(Self::from_tokens(tokens))
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for piece in pre_tokenize(text) {
            if let Some(id) = self.id(&piece) {
                ids.push(id);
                continue;
            }
            let mut chars = piece.chars().peekable();
            if chars.peek() == Some(&SPACE_MARK) {
                chars.next();
                ids.push(self.id(&SPACE_MARK.to_string()).unwrap_or(Self::UNK_ID));
            }
            for ch in chars {
                let mut buf = [0u8; 4];
                ids.push(self.id(ch.encode_utf8(&mut buf)).unwrap_or(Self::UNK_ID));
            }
        }
        ids
    }

    /// Joins tokens back into text, dropping pad/bos/eos.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                Self::PAD_ID | Self::BOS_ID | Self::EOS_ID => {}
                Self::UNK_ID => out.push('\u{FFFD}'),
                _ => match self.tokens.get(id) {
                    Some(t) => out.push_str(t),
                    None => out.push('\u{FFFD}'),
                },
            }
        }
        let out = out.replace(SPACE_MARK, " ");
        match out.strip_prefix(' ') {
            Some(rest) => rest.to_string(),
            None => out,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frequency_order() {
        let tok = Tokenizer::build(&["a b", "b c"]).unwrap();
        let words: Vec<&str> = tok.tokens()[4..7].iter().map(String::as_str).collect();
        assert_eq!(words, vec!["▁b", "▁a", "▁c"]);
        assert_eq!(&tok.tokens()[..4], &["<pad>", "<bos>", "<eos>", "<unk>"]);
        let ids = tok.encode("b a");
        assert_eq!(ids, vec![tok.id("▁b").unwrap(), tok.id("▁a").unwrap()]);
        assert_eq!(tok.decode(&ids), "b a");
    }

    #[test]
    fn unseen_word_falls_back_to_characters() {
        let tok = Tokenizer::build(&["a b", "b c"]).unwrap();
        let ids = tok.encode("cab");
        let expect: Vec<usize> = ["▁", "c", "a", "b"].iter().map(|t| tok.id(t).unwrap()).collect();
        assert_eq!(ids, expect);
        assert_eq!(tok.decode(&ids), "cab");
        let ids = tok.encode("z");
        assert_eq!(ids, vec![tok.id("▁").unwrap(), Tokenizer::UNK_ID]);
    }

    #[test]
    fn punctuation_and_lists() {
        let text = "Column: ['London', 'Boston'] Answer:";
        let tok = Tokenizer::build(&[text]).unwrap();
        let pieces = pre_tokenize(text);
        assert_eq!(
            pieces,
            vec!["▁Column", ":", "▁[", "'", "London", "'", ",", "▁'", "Boston", "'", "]", "▁Answer", ":"]
        );
        assert_eq!(tok.decode(&tok.encode(text)), text);
    }

    #[test]
    fn whitespace_edge_cases() {
        let tok = Tokenizer::build(&["x\n\t"]).unwrap();
        for text in ["", " x", "x ", "x  x", "x\nx", "  ", "\t"] {
            assert_eq!(tok.decode(&tok.encode(text)), text, "{text:?}");
        }
    }

    #[test]
    fn empty_corpus() {
        assert!(matches!(Tokenizer::build::<&str>(&[]), Err(Error::EmptyCorpus)));
    }

    proptest! {
        #[test]
        fn round_trip_on_known_characters(text in "[a-zA-Z0-9 ,.:'\\[\\]$@-]{0,40}") {
            let tok = Tokenizer::build(&["abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789,.:'[]$@-"]).unwrap();
            let ids = tok.encode(&text);
            prop_assert!(ids.iter().all(|&i| i < tok.vocab_size()));
            prop_assert_eq!(tok.decode(&ids), text);
        }
    }
}
