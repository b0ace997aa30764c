use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const END_ACTION: &str = "<eoa>";
/// Placeholder whose embedding is summed with the projected observation.
pub const OBSERVATION: &str = "<obs>";

/// Closed word list shared by prompts, instructions, and discrete actions.
pub const BUILTIN_WORDS: &[&str] = &[
    PAD, END_ACTION, OBSERVATION,
    // prompt template
    "agent", "acts", "in", "sees", "with",
    "walker", "arm", "words", "codes", "objects", "joints",
    "gridnav", "reacher2", "reacher4", "reacher7",
    // instructions
    "go", "to", "the", "pick", "up", "reach", "target",
    "red", "green", "blue", "yellow", "ball", "box", "key",
    // discrete actions
    "forward", "turn", "left", "right",
];

/// Text tokens occupy `[0, words.len())`; continuous-action tokens occupy the
/// reserved range `[action_base, action_base + action_span)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
    action_base: u32,
    action_span: u32,
}

impl Vocabulary {
    pub fn new(words: Vec<String>, action_base: u32, action_span: u32) -> Result<Self> {
        if words.len() > action_base as usize {
            return Err(Error::Config(format!(
                "{} text tokens overlap the action range starting at {action_base}",
                words.len()
            )));
        }
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary word {w:?}")));
            }
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary word `{w}`")));
            }
        }
        for special in [PAD, END_ACTION, OBSERVATION] {
            if !index.contains_key(special) {
                return Err(Error::Config(format!("vocabulary lacks `{special}`")));
            }
        }
        Ok(Vocabulary {
            words,
            index,
            action_base,
            action_span,
        })
    }

    pub fn builtin(action_base: u32, action_span: u32) -> Result<Self> {
        Self::new(
            BUILTIN_WORDS.iter().map(|w| w.to_string()).collect(),
            action_base,
            action_span,
        )
    }

    /// Built-in words with the action range reserved for `codec` tokens.
    pub fn for_codec(codec: &crate::codec::CodecConfig) -> Result<Self> {
        Self::builtin(codec.token_base, codec.token_span())
    }

    /// Total id count, i.e. the language-model head width.
    pub fn size(&self) -> usize {
        (self.action_base + self.action_span) as usize
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn action_base(&self) -> u32 {
        self.action_base
    }

    pub fn action_span(&self) -> u32 {
        self.action_span
    }

    pub fn action_range(&self) -> Range<u32> {
        self.action_base..self.action_base + self.action_span
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn pad_id(&self) -> u32 {
        self.index[PAD]
    }

    pub fn end_action_id(&self) -> u32 {
        self.index[END_ACTION]
    }

    pub fn observation_id(&self) -> u32 {
        self.index[OBSERVATION]
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&id| {
                self.words.get(id as usize).map(String::as_str).ok_or_else(|| {
                    Error::Internal(format!("token {id} is not a text token"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::GRID_ACTIONS;

    #[test]
    fn ranges_are_disjoint() {
        let v = Vocabulary::builtin(256, 512).unwrap();
        assert!((v.words().len() as u32) <= v.action_range().start);
        assert_eq!(v.size(), 768);
        assert!(Vocabulary::builtin(8, 512).is_err());
    }

    #[test]
    fn discrete_actions_round_trip() {
        let v = Vocabulary::builtin(256, 512).unwrap();
        for a in GRID_ACTIONS {
            assert_eq!(v.detokenize(&v.tokenize(a).unwrap()).unwrap(), a);
        }
        assert!(matches!(v.tokenize("fly away"), Err(Error::UnknownWord(w)) if w == "fly"));
    }
}
