use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DELIMITERS;
use crate::error::{Error, Result};

pub type TokenId = usize;

/// Splits text into tokens: reserved delimiters verbatim, everything else
/// lowercased; words are runs of alphanumerics, `'` and `_`, and every other
/// non-space character is its own token.
pub fn tokenize_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if DELIMITERS.contains(&chunk) {
            out.push(chunk.to_string());
            continue;
        }
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() || ch == '\'' || ch == '_' {
                word.extend(ch.to_lowercase());
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_lowercase().collect());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Canonical form of a text: its tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    tokenize_words(text).join(" ")
}

/// Token/id bijection with a fixed block of reserved ids at the front.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl Vocab {
    pub const PAD: TokenId = 0;
    pub const BOS: TokenId = 1;
    pub const EOS: TokenId = 2;
    pub const UNK: TokenId = 3;
    pub const P1: TokenId = 4;
    pub const P2: TokenId = 5;
    pub const RES: TokenId = 6;
    pub const STYLE_NATURAL: TokenId = 7;
    pub const STYLE_FEEDBACK: TokenId = 8;

    pub const RESERVED: [&'static str; 9] = [
        "<pad>",
        "<bos>",
        "<eos>",
        "<unk>",
        "[P1]",
        "[P2]",
        "[RES]",
        "<style:natural>",
        "<style:feedback>",
    ];

    fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// A vocabulary of only the reserved tokens.
    pub fn reserved_only() -> Vocab {
        Vocab::from_tokens(Vocab::RESERVED.iter().map(|s| s.to_string()).collect())
            .expect("reserved tokens are distinct")
    }

    /// Builds from token counts over `texts`; ties in frequency are broken
    /// lexicographically so the result is independent of input order.
    pub fn build<'a, I>(texts: I, min_count: usize, max_size: Option<usize>) -> Vocab
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in tokenize_words(text) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !Vocab::RESERVED.contains(&t.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if let Some(max) = max_size {
            entries.truncate(max.saturating_sub(Vocab::RESERVED.len()));
        }
        let mut tokens: Vec<String> = Vocab::RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(entries.into_iter().map(|(t, _)| t));
        Vocab::from_tokens(tokens).expect("counted tokens are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize_words(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(Vocab::UNK))
            .collect()
    }

    /// Joins tokens with spaces, skipping padding and sequence markers.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, Vocab::PAD | Vocab::BOS | Vocab::EOS))
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&VocabFile {
            tokens: self.tokens.clone(),
        })
        .expect("vocab serializes")
    }

    pub fn from_json(s: &str) -> Result<Vocab> {
        let file: VocabFile = serde_json::from_str(s)?;
        if file.tokens.len() < Vocab::RESERVED.len() || file.tokens.iter().zip(Vocab::RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Vocab("reserved token block is missing or reordered".into()));
        }
        Vocab::from_tokens(file.tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        Vocab::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> Vocab {
        Vocab::build(["yes or no", "you could say hey, i'm 30."], 1, None)
    }

    #[test]
    fn round_trip_in_vocab_text() {
        let v = small();
        let ids = v.encode("yes or no");
        assert!(!ids.contains(&Vocab::UNK));
        assert_eq!(v.decode(&ids), "yes or no");
    }

    #[test]
    fn empty_text() {
        let v = small();
        assert!(v.encode("").is_empty());
        assert_eq!(v.decode(&[]), "");
    }

    #[test]
    fn out_of_vocab_maps_to_unk() {
        let v = small();
        assert!(v.encode("yes banana").contains(&Vocab::UNK));
    }

    #[test]
    fn punctuation_and_case_split() {
        assert_eq!(tokenize_words("Hey, I'm 30."), vec!["hey", ",", "i'm", "30", "."]);
        assert_eq!(tokenize_words("[P1] hi [RES] yo"), vec!["[P1]", "hi", "[RES]", "yo"]);
        assert_eq!(tokenize_words("[_P1_]"), vec!["[", "_p1_", "]"]);
    }

    #[test]
    fn delimiters_get_reserved_ids() {
        let v = small();
        assert_eq!(
            v.encode("[P1] yes [P2] no [RES] or"),
            vec![
                Vocab::P1,
                v.id("yes").unwrap(),
                Vocab::P2,
                v.id("no").unwrap(),
                Vocab::RES,
                v.id("or").unwrap()
            ]
        );
    }

    #[test]
    fn build_is_order_independent() {
        let a = Vocab::build(["b a", "c a"], 1, None);
        let b = Vocab::build(["c a", "b a"], 1, None);
        assert_eq!(a, b);
        assert_eq!(a.token(Vocab::RESERVED.len()), "a");
    }

    #[test]
    fn json_round_trip_keeps_reserved_ids() {
        let v = small();
        let w = Vocab::from_json(&v.to_json()).unwrap();
        assert_eq!(v, w);
        assert_eq!(w.id("[RES]"), Some(Vocab::RES));
        assert!(Vocab::from_json(r#"{"tokens":["a","b"]}"#).is_err());
    }

    proptest! {
        #[test]
        fn decode_encode_is_identity_on_normalized_text(words in proptest::collection::vec("[a-z]{1,6}|[,.?!]", 0..12)) {
            let text = words.join(" ");
            let v = Vocab::build([text.as_str()], 1, None);
            let ids = v.encode(&text);
            prop_assert_eq!(v.decode(&ids), normalize(&text));
            prop_assert_eq!(v.encode(&v.decode(&ids)), ids);
        }
    }
}
