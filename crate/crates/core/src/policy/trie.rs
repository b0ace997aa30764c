use std::collections::BTreeMap;
use std::ops::Range;

use super::vocab::Vocabulary;
use crate::codec::{ActionKind, ActionSpaceSpec, CodecConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Node {
    children: BTreeMap<u32, usize>,
    leaf: Option<usize>,
}

/// Prefix tree over the token sequences of every valid action in one space.
#[derive(Clone, Debug, PartialEq)]
pub enum ActionTrie {
    /// Tokenized action strings, each terminated by the end-of-action token.
    Discrete { nodes: Vec<Node>, actions: Vec<String> },
    /// One admissible token range per codebook level.
    Continuous { levels: Vec<Range<u32>> },
}

/// Position inside an [`ActionTrie`].
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TrieCursor {
    node: usize,
    path: Vec<u32>,
}

impl TrieCursor {
    pub fn path(&self) -> &[u32] {
        &self.path
    }
}

impl ActionTrie {
    pub fn discrete(actions: &[String], vocab: &Vocabulary) -> Result<Self> {
        let eoa = vocab.end_action_id();
        let mut nodes = vec![Node::default()];
        for (i, a) in actions.iter().enumerate() {
            let mut tokens = vocab.tokenize(a)?;
            if tokens.is_empty() {
                return Err(Error::Config("empty discrete action".into()));
            }
            tokens.push(eoa);
            let mut cur = 0;
            for t in tokens {
                cur = match nodes[cur].children.get(&t) {
                    Some(&next) => next,
                    None => {
                        nodes.push(Node::default());
                        let next = nodes.len() - 1;
                        nodes[cur].children.insert(t, next);
                        next
                    }
                };
            }
            if nodes[cur].leaf.replace(i).is_some() {
                return Err(Error::Config(format!("duplicate discrete action `{a}`")));
            }
        }
        Ok(ActionTrie::Discrete {
            nodes,
            actions: actions.to_vec(),
        })
    }

    pub fn continuous(codec: &CodecConfig) -> Self {
        ActionTrie::Continuous {
            levels: (0..codec.levels).map(|m| codec.level_range(m)).collect(),
        }
    }

    /// Builds the trie for `space`; continuous spaces need the codec layout.
    pub fn for_space(space: &ActionSpaceSpec, vocab: &Vocabulary, codec: Option<&CodecConfig>) -> Result<Self> {
        match &space.kind {
            ActionKind::Discrete { actions } => Self::discrete(actions, vocab),
            ActionKind::Continuous { .. } => match codec {
                Some(c) => Ok(Self::continuous(c)),
                None => Err(Error::Config(format!(
                    "continuous space `{}` needs an action codec",
                    space.embodiment
                ))),
            },
        }
    }

    pub fn root(&self) -> TrieCursor {
        TrieCursor::default()
    }

    /// Legal next tokens in increasing id order.
    pub fn legal(&self, cursor: &TrieCursor) -> Vec<u32> {
        match self {
            ActionTrie::Discrete { nodes, .. } => nodes[cursor.node].children.keys().copied().collect(),
            ActionTrie::Continuous { levels } => match levels.get(cursor.path.len()) {
                Some(r) => r.clone().collect(),
                None => Vec::new(),
            },
        }
    }

    pub fn is_legal(&self, cursor: &TrieCursor, token: u32) -> bool {
        match self {
            ActionTrie::Discrete { nodes, .. } => nodes[cursor.node].children.contains_key(&token),
            ActionTrie::Continuous { levels } => levels
                .get(cursor.path.len())
                .is_some_and(|r| r.contains(&token)),
        }
    }

    pub fn advance(&self, cursor: &TrieCursor, token: u32) -> Result<TrieCursor> {
        if !self.is_legal(cursor, token) {
            return Err(Error::Internal(format!(
                "token {token} is not a legal continuation of {:?}",
                cursor.path
            )));
        }
        let node = match self {
            ActionTrie::Discrete { nodes, .. } => nodes[cursor.node].children[&token],
            ActionTrie::Continuous { .. } => 0,
        };
        let mut path = cursor.path.clone();
        path.push(token);
        Ok(TrieCursor { node, path })
    }

    pub fn is_complete(&self, cursor: &TrieCursor) -> bool {
        match self {
            ActionTrie::Discrete { nodes, .. } => nodes[cursor.node].leaf.is_some(),
            ActionTrie::Continuous { levels } => cursor.path.len() == levels.len(),
        }
    }

    /// The action string at a completed discrete cursor.
    pub fn discrete_action(&self, cursor: &TrieCursor) -> Option<&str> {
        match self {
            ActionTrie::Discrete { nodes, actions } => nodes[cursor.node].leaf.map(|i| actions[i].as_str()),
            ActionTrie::Continuous { .. } => None,
        }
    }

    /// Follows `tokens` from the root; fails on the first illegal token.
    pub fn walk(&self, tokens: &[u32]) -> Result<TrieCursor> {
        tokens.iter().try_fold(self.root(), |c, &t| self.advance(&c, t))
    }

    /// Every root-to-leaf token path, in lexicographic id order.
    pub fn paths(&self) -> Vec<Vec<u32>> {
        let mut out = Vec::new();
        let mut stack = vec![self.root()];
        while let Some(c) = stack.pop() {
            if self.is_complete(&c) {
                out.push(c.path.clone());
                continue;
            }
            for t in self.legal(&c).into_iter().rev() {
                stack.push(self.advance(&c, t).expect("legal by construction"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::builtin(256, 512).unwrap()
    }

    #[test]
    fn discrete_paths_are_the_action_set() {
        let v = vocab();
        let actions: Vec<String> = ["forward", "turn left", "turn right", "pick"].map(String::from).to_vec();
        let trie = ActionTrie::discrete(&actions, &v).unwrap();
        let mut decoded: Vec<String> = trie
            .paths()
            .iter()
            .map(|p| {
                assert_eq!(*p.last().unwrap(), v.end_action_id());
                v.detokenize(&p[..p.len() - 1]).unwrap()
            })
            .collect();
        decoded.sort();
        let mut expected = actions.clone();
        expected.sort();
        assert_eq!(decoded, expected);
    }

    #[test]
    fn after_shared_prefix_only_its_continuations_are_legal() {
        let v = Vocabulary::new(
            ["<pad>", "<eoa>", "<obs>", "left", "right", "pick", "apple"].map(String::from).to_vec(),
            16,
            4,
        )
        .unwrap();
        let actions: Vec<String> = ["left", "right", "pick apple"].map(String::from).to_vec();
        let trie = ActionTrie::discrete(&actions, &v).unwrap();
        let c = trie.advance(&trie.root(), v.id("pick").unwrap()).unwrap();
        assert_eq!(trie.legal(&c), vec![v.id("apple").unwrap()]);
        let c = trie.advance(&c, v.id("apple").unwrap()).unwrap();
        assert_eq!(trie.legal(&c), vec![v.end_action_id()]);
        let c = trie.advance(&c, v.end_action_id()).unwrap();
        assert_eq!(trie.discrete_action(&c), Some("pick apple"));
        assert!(trie.advance(&trie.root(), v.id("apple").unwrap()).is_err());
    }

    #[test]
    fn continuous_trie_has_fixed_depth() {
        let cfg = CodecConfig {
            codebook_size: 3,
            ..CodecConfig::desk()
        };
        let trie = ActionTrie::continuous(&cfg);
        let paths = trie.paths();
        assert_eq!(paths.len(), 9);
        assert!(paths.iter().all(|p| p.len() == 2 && p.iter().all(|t| (256..259).contains(t))));
    }
}
