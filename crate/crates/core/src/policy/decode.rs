use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layout::SequenceLayout;
use super::model::PolicyModel;
use super::trie::ActionTrie;
use crate::codec::{ActionKind, ActionSpaceSpec, ActionTokenSeq, RvqCodec};
use crate::envs::Action;
use crate::error::{Error, Result};

/// Softmax restricted to the legal tokens; every other token has probability
/// exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedDistribution {
    pub tokens: Vec<u32>,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl MaskedDistribution {
    /// `temperature <= 0` yields the unit-temperature distribution.
    pub fn new(logits: &[f64], legal: &[u32], temperature: f64) -> Result<Self> {
        if legal.is_empty() {
            return Err(Error::Internal("action trie cursor has no legal continuation".into()));
        }
        let t = if temperature > 0.0 { temperature } else { 1.0 };
        let scaled: Vec<f64> = legal
            .iter()
            .map(|&id| {
                logits
                    .get(id as usize)
                    .map(|l| l / t)
                    .ok_or_else(|| Error::Internal(format!("legal token {id} outside {} logits", logits.len())))
            })
            .collect::<Result<_>>()?;
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let log_probs: Vec<f64> = scaled.iter().map(|v| v - lse).collect();
        Ok(MaskedDistribution {
            tokens: legal.to_vec(),
            probs: log_probs.iter().map(|l| l.exp()).collect(),
            log_probs,
        })
    }

    /// Probability of any token id, zero when illegal.
    pub fn prob(&self, token: u32) -> f64 {
        self.tokens
            .iter()
            .position(|&t| t == token)
            .map_or(0.0, |i| self.probs[i])
    }

    /// Entropy divided by its maximum `ln(#legal)`; zero for a forced move.
    pub fn normalized_entropy(&self) -> f64 {
        let n = self.tokens.len();
        if n < 2 {
            return 0.0;
        }
        let h: f64 = -self
            .probs
            .iter()
            .zip(&self.log_probs)
            .map(|(p, l)| if *p > 0.0 { p * l } else { 0.0 })
            .sum::<f64>();
        (h / (n as f64).ln()).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepChoice {
    pub token: u32,
    /// Log-probability under the unit-temperature masked distribution.
    pub logprob: f64,
    pub normalized_entropy: f64,
}

/// Picks the next action token among `legal`: greedy (lowest id on ties) when
/// `temperature == 0`, otherwise sampled from the tempered masked softmax.
pub fn constrained_step(
    logits: &[f64],
    legal: &[u32],
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepChoice> {
    let unit = MaskedDistribution::new(logits, legal, 1.0)?;
    let idx = if temperature <= 0.0 {
        let mut best = 0;
        for i in 1..unit.probs.len() {
            if unit.log_probs[i] > unit.log_probs[best] {
                best = i;
            }
        }
        best
    } else {
        let dist = if temperature == 1.0 {
            unit.clone()
        } else {
            MaskedDistribution::new(logits, legal, temperature)?
        };
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = dist.probs.len() - 1;
        for (i, p) in dist.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        pick
    };
    Ok(StepChoice {
        token: unit.tokens[idx],
        logprob: unit.log_probs[idx],
        normalized_entropy: unit.normalized_entropy(),
    })
}

/// Gradients of a chosen token's masked log-probability and of the normalized
/// entropy with respect to the full logit row.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedTokenStats {
    pub logprob: f64,
    pub normalized_entropy: f64,
    pub d_logprob: Vec<f64>,
    pub d_entropy: Vec<f64>,
}

pub fn masked_token_stats(logits: &[f64], legal: &[u32], token: u32) -> Result<MaskedTokenStats> {
    let dist = MaskedDistribution::new(logits, legal, 1.0)?;
    let k = dist
        .tokens
        .iter()
        .position(|&t| t == token)
        .ok_or_else(|| Error::Internal(format!("token {token} is not legal here")))?;
    let mut d_logprob = vec![0.0; logits.len()];
    let mut d_entropy = vec![0.0; logits.len()];
    let n = dist.tokens.len();
    let ent = dist.normalized_entropy();
    for (i, &t) in dist.tokens.iter().enumerate() {
        d_logprob[t as usize] = f64::from(u8::from(i == k)) - dist.probs[i];
    }
    if n > 1 {
        let h: f64 = -dist.probs.iter().zip(&dist.log_probs).map(|(p, l)| p * l).sum::<f64>();
        let norm = (n as f64).ln();
        for (i, &t) in dist.tokens.iter().enumerate() {
            d_entropy[t as usize] = -dist.probs[i] * (dist.log_probs[i] + h) / norm;
        }
    }
    Ok(MaskedTokenStats {
        logprob: dist.log_probs[k],
        normalized_entropy: ent,
        d_logprob,
        d_entropy,
    })
}

/// One decoded environment action with its per-token statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedAction {
    pub action: Action,
    pub tokens: Vec<u32>,
    pub logprobs: Vec<f64>,
    pub entropies: Vec<f64>,
    /// Value-head input at the pre-action position.
    pub value_features: Vec<f64>,
}

impl DecodedAction {
    pub fn logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }

    pub fn mean_entropy(&self) -> f64 {
        self.entropies.iter().sum::<f64>() / self.entropies.len().max(1) as f64
    }
}

/// Autoregressively emits one action for the final (action-less) group of
/// `layout`, restricted to the paths of `trie`. Forced tokens after the first
/// are appended without a forward pass; their log-probability is exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn decode_action(
    model: &PolicyModel,
    layout: &SequenceLayout,
    space: &ActionSpaceSpec,
    trie: &ActionTrie,
    codec: Option<&RvqCodec>,
    privileged: Option<&[f64]>,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DecodedAction> {
    if layout.groups.last().map_or(true, |g| !g.action.is_empty()) {
        return Err(Error::Internal("decoding needs a final group without action tokens".into()));
    }
    let codec = match (&space.kind, codec) {
        (ActionKind::Continuous { .. }, None) => {
            return Err(Error::Config(format!(
                "continuous space `{}` needs an action codec",
                space.embodiment
            )))
        }
        (_, c) => c,
    };
    let mut layout = layout.clone();
    let mut cursor = trie.root();
    let mut out = DecodedAction {
        action: Action::Discrete(String::new()),
        tokens: Vec::new(),
        logprobs: Vec::new(),
        entropies: Vec::new(),
        value_features: Vec::new(),
    };
    while !trie.is_complete(&cursor) {
        let legal = trie.legal(&cursor);
        let choice = if legal.len() == 1 && !out.tokens.is_empty() {
            StepChoice {
                token: legal[0],
                logprob: 0.0,
                normalized_entropy: 0.0,
            }
        } else {
            let trunk = model.forward(&layout, None)?;
            let pos = layout.len() - 1;
            if out.tokens.is_empty() {
                out.value_features = model.value_features(&trunk, pos, privileged)?;
            }
            let (logits, _) = model.logits_at(&trunk.hidden, &[pos])?;
            constrained_step(logits.row(0), &legal, temperature, rng)?
        };
        cursor = trie.advance(&cursor, choice.token)?;
        out.tokens.push(choice.token);
        out.logprobs.push(choice.logprob);
        out.entropies.push(choice.normalized_entropy);
        layout.groups.last_mut().expect("checked").action.push(choice.token);
    }
    out.action = match &space.kind {
        ActionKind::Discrete { .. } => Action::Discrete(
            trie.discrete_action(&cursor)
                .ok_or_else(|| Error::Internal("discrete trie leaf without action".into()))?
                .to_string(),
        ),
        ActionKind::Continuous { dim, .. } => {
            let codec = codec.expect("checked above");
            Action::Continuous(codec.decode(&ActionTokenSeq(out.tokens.clone()), *dim)?)
        }
    };
    Ok(out)
}

/// Teacher-forced log-probabilities and normalized entropies of the final
/// group's action tokens under the masked distribution.
pub fn action_token_logprobs(model: &PolicyModel, layout: &SequenceLayout, trie: &ActionTrie) -> Result<Vec<(f64, f64)>> {
    let trunk = model.forward(layout, None)?;
    let targets = layout.targets();
    let positions: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let (logits, _) = model.logits_at(&trunk.hidden, &positions)?;
    let mut cursor = trie.root();
    let mut out = Vec::with_capacity(targets.len());
    for (i, &(_, tok)) in targets.iter().enumerate() {
        let dist = MaskedDistribution::new(logits.row(i), &trie.legal(&cursor), 1.0)?;
        let lp = dist
            .tokens
            .iter()
            .position(|&t| t == tok)
            .map(|k| dist.log_probs[k])
            .ok_or_else(|| Error::Internal(format!("token {tok} is not legal here")))?;
        out.push((lp, dist.normalized_entropy()));
        cursor = trie.advance(&cursor, tok)?;
    }
    Ok(out)
}
