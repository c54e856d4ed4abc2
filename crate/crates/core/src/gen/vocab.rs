use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::GenError;
use crate::expr::{self, OperatorKind, EOS, SEP, SOS};

pub const PAD: usize = 0;
pub const SOS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const MASK: usize = 4;
/// Ids below this are framing or padding, never expression items.
pub const FIRST_ITEM: usize = 5;

pub const PAD_TOKEN: &str = "<PAD>";
pub const MASK_TOKEN: &str = "<MASK>";

/// Token table: specials, the operator symbols, then `f0..f{K-1}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(n_features: usize) -> Self {
        let mut tokens: Vec<String> = [PAD_TOKEN, SOS, SEP, EOS, MASK_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend(OperatorKind::ALL.iter().map(|o| o.symbol().to_string()));
        tokens.extend((0..n_features).map(|i| format!("f{i}")));
        Self::from_tokens(tokens).expect("built-in vocabulary is bijective")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self, GenError> {
        let ids: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if ids.len() != tokens.len() {
            return Err(GenError::Vocabulary("duplicate token in vocabulary".into()));
        }
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN) {
            return Err(GenError::Vocabulary("PAD must have id 0".into()));
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.tokens.len() - FIRST_ITEM - OperatorKind::ALL.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Ids of a serialized feature set. Operator aliases map to their symbol.
    pub fn encode(&self, token_string: &str) -> Result<Vec<usize>, GenError> {
        expr::tokenize(token_string)
            .into_iter()
            .map(|t| {
                let canonical = OperatorKind::from_token(t).map_or(t, |o| o.symbol());
                self.id(canonical)
                    .ok_or_else(|| GenError::Vocabulary(format!("token {t:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String, GenError> {
        let parts: Result<Vec<&str>, GenError> = ids
            .iter()
            .map(|&i| {
                self.token(i)
                    .ok_or_else(|| GenError::Vocabulary(format!("id {i} out of range")))
            })
            .collect();
        Ok(parts?.join(" "))
    }

    pub fn check_ids(&self, ids: &[usize]) -> Result<(), GenError> {
        match ids.iter().find(|&&i| i >= self.len()) {
            Some(i) => Err(GenError::Vocabulary(format!(
                "id {i} out of range for vocabulary of {}",
                self.len()
            ))),
            None => Ok(()),
        }
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = GenError;

    fn try_from(tokens: Vec<String>) -> Result<Self, GenError> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}
