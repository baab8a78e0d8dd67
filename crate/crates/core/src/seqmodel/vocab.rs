use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Reserved ids, identical in every vocabulary.
pub mod special {
    use super::TokenId;

    pub const PAD: TokenId = 0;
    pub const BOS: TokenId = 1;
    pub const EOS: TokenId = 2;
    pub const THINK_OPEN: TokenId = 3;
    pub const THINK_CLOSE: TokenId = 4;
    /// Fixed answer tail that follows the rewrite ("All can be embedded into").
    pub const ANSWER: TokenId = 5;
    pub const DISC_EMB: TokenId = 6;
    pub const GEN_EMB: TokenId = 7;

    pub const COUNT: usize = 8;

    pub const SYMBOLS: [&str; COUNT] = [
        "<pad>",
        "<bos>",
        "<eos>",
        "<think>",
        "</think>",
        "<all_can_be_embedded_into>",
        "<disc_emb>",
        "<gen_emb>",
    ];
}

/// Tokens that must follow `</think>` in a well-formed rewrite.
pub const ANSWER_SUFFIX: &[TokenId] = &[special::ANSWER];

/// Symbol table: the special tokens followed by task content symbols.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    symbols: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() < special::COUNT || symbols[..special::COUNT] != special::SYMBOLS {
            return Err(Error::Format("vocabulary does not start with the special tokens".into()));
        }
        Vocab::new(symbols[special::COUNT..].to_vec())
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.symbols
    }
}

impl Vocab {
    /// Builds a vocabulary from content symbols; specials are prepended.
    pub fn new(content: Vec<String>) -> Result<Self> {
        let mut symbols: Vec<String> = special::SYMBOLS.iter().map(|s| s.to_string()).collect();
        symbols.extend(content);
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i as TokenId).is_some() {
                return Err(Error::BadConfig(format!("duplicate vocabulary symbol {s:?}")));
            }
        }
        Ok(Self { symbols, index })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> Result<TokenId> {
        self.index
            .get(symbol)
            .copied()
            .ok_or_else(|| Error::UnknownSymbol(symbol.to_string()))
    }

    pub fn symbol(&self, id: TokenId) -> &str {
        &self.symbols[id as usize]
    }

    pub fn encode(&self, symbols: &[String]) -> Result<Vec<TokenId>> {
        symbols.iter().map(|s| self.id(s)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.symbol(i).to_string()).collect()
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < special::COUNT
    }
}

/// Grammar of a well-formed rewrite:
/// `<think> w+ </think> ANSWER_SUFFIX <eos>` with every `w` a content token.
pub fn follows_rewrite_template(tokens: &[TokenId]) -> bool {
    let tail = ANSWER_SUFFIX.len() + 2; // </think> + suffix + <eos>
    if tokens.len() < 2 + tail || tokens[0] != special::THINK_OPEN {
        return false;
    }
    let body_end = tokens.len() - tail;
    let body = &tokens[1..body_end];
    if body.iter().any(|&t| Vocab::is_special(t)) {
        return false;
    }
    tokens[body_end] == special::THINK_CLOSE
        && &tokens[body_end + 1..tokens.len() - 1] == ANSWER_SUFFIX
        && tokens[tokens.len() - 1] == special::EOS
}

#[cfg(test)]
mod tests {
    use super::special::*;
    use super::*;

    #[test]
    fn template_grammar() {
        let w = special::COUNT as TokenId;
        assert!(follows_rewrite_template(&[THINK_OPEN, w, THINK_CLOSE, ANSWER, EOS]));
        assert!(follows_rewrite_template(&[THINK_OPEN, w, w + 1, THINK_CLOSE, ANSWER, EOS]));
        assert!(!follows_rewrite_template(&[]));
        assert!(!follows_rewrite_template(&[THINK_OPEN, THINK_CLOSE, ANSWER, EOS]));
        assert!(!follows_rewrite_template(&[THINK_OPEN, w, ANSWER, EOS]));
        assert!(!follows_rewrite_template(&[THINK_OPEN, w, THINK_CLOSE, EOS]));
        assert!(!follows_rewrite_template(&[THINK_OPEN, w, THINK_CLOSE, ANSWER]));
        assert!(!follows_rewrite_template(&[THINK_OPEN, GEN_EMB, THINK_CLOSE, ANSWER, EOS]));
        assert!(!follows_rewrite_template(&[THINK_OPEN, w, THINK_CLOSE, ANSWER, EOS, EOS]));
    }

    #[test]
    fn specials_cannot_be_redefined() {
        assert!(Vocab::new(vec!["<eos>".into()]).is_err());
        let v = Vocab::new(vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(v.id("b").unwrap(), special::COUNT as TokenId + 1);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }
}
