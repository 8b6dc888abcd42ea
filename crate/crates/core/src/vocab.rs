use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::template::{TemplateSpec, TemplateVariant};
use crate::triplet::RelationType;

pub type TokenId = u32;

pub const DEFAULT_EOS: &str = "</s>";

/// Ordered token inventory shared by a scorer and the decoding grammar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    eos_id: TokenId,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    eos_id: TokenId,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        Vocab::new(r.tokens, r.eos_id)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            tokens: v.tokens,
            eos_id: v.eos_id,
        }
    }
}

impl Vocab {
    pub fn new(tokens: Vec<String>, eos_id: TokenId) -> Result<Self> {
        if eos_id as usize >= tokens.len() {
            return Err(Error::invalid(format!(
                "eos id {eos_id} outside vocabulary of {}",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocab {
            tokens,
            eos_id,
            index,
        })
    }

    /// EOS, relation tokens and the structure tokens of every template
    /// variant, followed by `content` words in the given order.
    pub fn standard<S: AsRef<str>>(content: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = vec![DEFAULT_EOS.to_string()];
        for t in all_structure_tokens() {
            tokens.push(t);
        }
        for w in content {
            tokens.push(w.as_ref().to_string());
        }
        Vocab::new(tokens, 0)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
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

    /// Joins tokens with single spaces, omitting EOS.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| id != self.eos_id)
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Ids of every known structure or relation token present in the vocabulary.
    pub fn marker_ids(&self) -> BTreeMap<String, TokenId> {
        all_structure_tokens()
            .into_iter()
            .filter_map(|t| self.id(&t).map(|id| (t, id)))
            .collect()
    }
}

/// Relation tokens plus the markers, terminators and masks of all variants.
pub fn all_structure_tokens() -> Vec<String> {
    let mut out: Vec<String> = RelationType::ALL
        .iter()
        .map(|r| r.token().to_string())
        .collect();
    for v in TemplateVariant::ALL {
        for t in TemplateSpec::new(v).structure_tokens() {
            if !out.iter().any(|o| o == t) {
                out.push(t.to_string());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_vocab_layout() {
        let v = Vocab::standard(&["i", "like"]).unwrap();
        assert_eq!(v.eos_id(), 0);
        assert_eq!(v.token(0), Some(DEFAULT_EOS));
        assert!(v.id("[RELATION]").is_some());
        assert!(v.id("Head Entity :").is_some());
        assert_eq!(v.id("like"), Some(v.len() as TokenId - 1));
        assert_eq!(v.decode(&[v.id("i").unwrap(), v.id("like").unwrap(), 0]), "i like");
    }

    #[test]
    fn rejects_duplicates_and_bad_eos() {
        assert!(Vocab::new(vec!["a".into(), "a".into()], 0).is_err());
        assert!(Vocab::new(vec!["a".into()], 3).is_err());
        assert!(Vocab::standard(&["[HEAD]"]).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocab::standard(&["dog"]).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }
}
