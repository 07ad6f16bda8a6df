use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a token in a [`Vocabulary`].
pub type TokenId = u32;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";
pub const IDK: &str = "<idk>";

/// Ids of the reserved tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub bos: TokenId,
    pub eos: TokenId,
    /// Separates context from query, and the prompt from the response.
    pub sep: TokenId,
    /// The refusal token ("I don't know").
    pub idk: TokenId,
}

/// Ordered set of distinct token strings with four reserved tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    specials: Specials,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    tokens: Vec<String>,
    specials: Specials,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = Error;

    fn try_from(repr: VocabularyRepr) -> Result<Self> {
        Vocabulary::from_parts(repr.tokens, repr.specials)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr { tokens: v.tokens, specials: v.specials }
    }
}

impl Vocabulary {
    /// Reserved tokens take ids 0..4 (`<bos>`, `<eos>`, `<sep>`, `<idk>`), then `words` in order.
    pub fn with_specials<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = [BOS, EOS, SEP, IDK].iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(Into::into));
        Self::from_parts(tokens, Specials { bos: 0, eos: 1, sep: 2, idk: 3 })
    }

    /// Validates uniqueness and that the special ids are in range and distinct.
    pub fn from_parts(tokens: Vec<String>, specials: Specials) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        let ids = [specials.bos, specials.eos, specials.sep, specials.idk];
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= tokens.len() {
                return Err(Error::Vocabulary(format!("special id {id} out of range")));
            }
            if ids[..i].contains(&id) {
                return Err(Error::Vocabulary(format!("special id {id} used twice")));
            }
        }
        Ok(Self { tokens, index, specials })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        let s = self.specials;
        id == s.bos || id == s.eos || id == s.sep || id == s.idk
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn check(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&t| t as usize >= self.tokens.len()) {
            Some(bad) => Err(Error::Vocabulary(format!(
                "token id {bad} out of range for vocabulary of size {}",
                self.tokens.len()
            ))),
            None => Ok(()),
        }
    }

    /// Space-joined token strings.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&t| self.token(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
