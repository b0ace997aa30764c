//! Glue between environments and the policy: prompts, action tokenization,
//! context windows, and episode rollouts.

use std::collections::VecDeque;

use rand_chacha::ChaCha8Rng;

use crate::codec::{ActionKind, RvqCodec};
use crate::envs::{Action, EnvSpec, Episode, EpisodeOutcome};
use crate::error::{Error, Result};
use crate::policy::{decode_action, ActionTrie, DecodedAction, PolicyModel, SequenceLayout, StepGroup, Vocabulary};
use crate::sft::trajectory::{ActionRecord, Trajectory, TrajectoryStep};

/// Fixed description of an embodiment placed before the instruction.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplate {
    pub agent: String,
    pub action_space: String,
    pub simulator: String,
    pub observation: String,
}

impl PromptTemplate {
    pub fn for_env(spec: &EnvSpec) -> Self {
        let (agent, action_space, observation) = match spec.domain() {
            "gridnav" => ("walker", "words", "objects"),
            _ => ("arm", "codes", "joints"),
        };
        let simulator = match spec.domain() {
            "gridnav" => "gridnav".to_string(),
            _ => spec.name.clone(),
        };
        PromptTemplate {
            agent: agent.into(),
            action_space: action_space.into(),
            simulator,
            observation: observation.into(),
        }
    }

    pub fn render(&self) -> String {
        format!(
            "agent {} acts with {} in {} sees {}",
            self.agent, self.action_space, self.simulator, self.observation
        )
    }
}

/// Everything needed to turn one environment into policy sequences.
#[derive(Clone, Debug)]
pub struct Embodiment {
    pub spec: EnvSpec,
    pub trie: ActionTrie,
    pub prompt: Vec<u32>,
    pub codec: Option<RvqCodec>,
}

impl Embodiment {
    pub fn new(spec: EnvSpec, vocab: &Vocabulary, codec: Option<&RvqCodec>) -> Result<Self> {
        let codec = match &spec.space.kind {
            ActionKind::Continuous { .. } => Some(
                codec
                    .ok_or_else(|| Error::Config(format!("environment `{}` needs an action codec", spec.name)))?
                    .clone(),
            ),
            ActionKind::Discrete { .. } => None,
        };
        if let Some(c) = &codec {
            let r = c.config.token_range();
            if !(vocab.action_range().start <= r.start && r.end <= vocab.action_range().end) {
                return Err(Error::Config(format!(
                    "codec tokens {r:?} fall outside the vocabulary action range {:?}",
                    vocab.action_range()
                )));
            }
        }
        let trie = ActionTrie::for_space(&spec.space, vocab, codec.as_ref().map(|c| &c.config))?;
        let prompt = vocab.tokenize(&PromptTemplate::for_env(&spec).render())?;
        Ok(Embodiment {
            spec,
            trie,
            prompt,
            codec,
        })
    }

    /// Token ids for one recorded action.
    pub fn action_tokens(&self, action: &ActionRecord, vocab: &Vocabulary) -> Result<Vec<u32>> {
        match (action, &self.codec) {
            (ActionRecord::Discrete { text }, _) => {
                let mut t = vocab.tokenize(text)?;
                t.push(vocab.end_action_id());
                self.trie.walk(&t).map_err(|_| Error::InvalidAction {
                    space: self.spec.space.embodiment.clone(),
                    detail: format!("`{text}` is not a valid action"),
                })?;
                Ok(t)
            }
            (ActionRecord::Continuous { vec }, Some(codec)) => {
                Ok(codec.encode_raw(vec, &self.spec.space.embodiment)?.0)
            }
            (ActionRecord::Continuous { .. }, None) => Err(Error::Config(format!(
                "environment `{}` has no codec for continuous actions",
                self.spec.name
            ))),
        }
    }
}

/// Rolling window of the most recent observation/action groups.
#[derive(Clone, Debug, PartialEq)]
pub struct History {
    prompt: Vec<u32>,
    instruction: Vec<u32>,
    groups: VecDeque<StepGroup>,
    context: usize,
}

impl History {
    pub fn new(prompt: Vec<u32>, instruction: Vec<u32>, context: usize) -> Self {
        History {
            prompt,
            instruction,
            groups: VecDeque::new(),
            context: context.max(1),
        }
    }

    /// Starts a new timestep with an empty action.
    pub fn observe(&mut self, obs: Vec<f64>) {
        if self.groups.len() == self.context {
            self.groups.pop_front();
        }
        self.groups.push_back(StepGroup { obs, action: Vec::new() });
    }

    pub fn act(&mut self, tokens: Vec<u32>) {
        if let Some(g) = self.groups.back_mut() {
            g.action = tokens;
        }
    }

    pub fn layout(&self) -> SequenceLayout {
        SequenceLayout {
            prompt: self.prompt.clone(),
            instruction: self.instruction.clone(),
            groups: self.groups.iter().cloned().collect(),
        }
    }
}

/// One policy-controlled episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub outcome: EpisodeOutcome,
    pub trajectory: Trajectory,
}

/// Plays one episode from `seed` with the policy.
pub fn run_episode(
    model: &PolicyModel,
    emb: &Embodiment,
    seed: u64,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Rollout> {
    let mut ep: Episode = emb.spec.reset(seed);
    let instruction = model.vocab.tokenize(ep.instruction())?;
    let mut hist = History::new(emb.prompt.clone(), instruction, model.config.context);
    let mut outcome = EpisodeOutcome {
        success: false,
        total_return: 0.0,
        steps: 0,
    };
    let mut steps = Vec::new();
    while !ep.is_done() {
        let obs = ep.observation();
        hist.observe(obs.clone());
        let d: DecodedAction = decode_action(
            model,
            &hist.layout(),
            &emb.spec.space,
            &emb.trie,
            emb.codec.as_ref(),
            None,
            temperature,
            rng,
        )?;
        hist.act(d.tokens.clone());
        let s = ep.step(&d.action)?;
        steps.push(TrajectoryStep {
            obs,
            action: ActionRecord::from(&d.action),
            reward: s.reward,
        });
        outcome.total_return += s.reward;
        outcome.success = s.success;
        outcome.steps += 1;
    }
    let trajectory = Trajectory {
        id: format!("{}-{seed}", emb.spec.name),
        domain: emb.spec.domain().to_string(),
        instruction: ep.instruction().to_string(),
        success: outcome.success,
        source: "policy".into(),
        steps,
    };
    Ok(Rollout { outcome, trajectory })
}

/// Success rate over the given seeds; greedy when `temperature == 0`.
pub fn success_rate(
    model: &PolicyModel,
    emb: &Embodiment,
    seeds: impl IntoIterator<Item = u64>,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut n = 0usize;
    let mut ok = 0usize;
    for seed in seeds {
        n += 1;
        if run_episode(model, emb, seed, temperature, rng)?.outcome.success {
            ok += 1;
        }
    }
    Ok(ok as f64 / n.max(1) as f64)
}

/// Converts an environment action to its recorded form.
pub fn record(action: &Action) -> ActionRecord {
    ActionRecord::from(action)
}
