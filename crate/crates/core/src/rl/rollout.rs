use rand_chacha::ChaCha8Rng;

use super::PopArtStats;
use crate::agent::{Embodiment, History};
use crate::envs::{Episode, EpisodeOutcome};
use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::policy::{decode_action, PolicyModel, SequenceLayout};

/// One environment instance with its running episode and context window.
#[derive(Clone, Debug)]
pub struct EnvRunner {
    /// Index of the embodiment in the training task list.
    pub task: usize,
    episode: Episode,
    history: History,
    next_seed: u64,
    seed_stride: u64,
    episode_return: f64,
    /// Episodes finished since the last call to [`EnvRunner::drain_completed`].
    completed: Vec<EpisodeOutcome>,
}

impl EnvRunner {
    /// Starts at `first_seed`; later episodes use `first_seed + k·stride`.
    pub fn new(task: usize, emb: &Embodiment, model: &PolicyModel, first_seed: u64, stride: u64) -> Result<Self> {
        let episode = emb.spec.reset(first_seed);
        let history = History::new(
            emb.prompt.clone(),
            model.vocab.tokenize(episode.instruction())?,
            model.config.context,
        );
        Ok(EnvRunner {
            task,
            episode,
            history,
            next_seed: first_seed + stride.max(1),
            seed_stride: stride.max(1),
            episode_return: 0.0,
            completed: Vec::new(),
        })
    }

    fn reset(&mut self, emb: &Embodiment, model: &PolicyModel) -> Result<()> {
        self.episode = emb.spec.reset(self.next_seed);
        self.next_seed += self.seed_stride;
        self.history = History::new(
            emb.prompt.clone(),
            model.vocab.tokenize(self.episode.instruction())?,
            model.config.context,
        );
        self.episode_return = 0.0;
        Ok(())
    }

    pub fn drain_completed(&mut self) -> Vec<EpisodeOutcome> {
        std::mem::take(&mut self.completed)
    }
}

/// One on-policy decision.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    /// Context ending with the emitted action tokens.
    pub layout: SequenceLayout,
    pub tokens: Vec<u32>,
    /// Summed log-probability of `tokens` under the collecting policy.
    pub logprob: f64,
    pub entropy: f64,
    pub reward: f64,
    pub done: bool,
    /// Unnormalized value estimate of the pre-action state.
    pub value: f64,
    /// Value-head input (includes the privileged features).
    pub features: Vec<f64>,
    pub privileged: Vec<f64>,
}

/// `[num_envs][T]` transitions plus the value after the final step.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    pub tasks: Vec<usize>,
    pub steps: Vec<Vec<Transition>>,
    pub bootstrap: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.steps.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn unnormalized_value(model: &PolicyModel, popart: &PopArtStats, features: &[f64]) -> Result<f64> {
    let v = model.value_batch(&Tensor::from_vec(&[1, features.len()], features.to_vec())?)?[0];
    Ok(popart.denormalize(v))
}

/// Runs every environment for `t` steps with sampled constrained decoding,
/// resetting finished episodes in place.
pub fn collect_rollouts(
    model: &PolicyModel,
    tasks: &[Embodiment],
    runners: &mut [EnvRunner],
    t: usize,
    popart: &PopArtStats,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutBatch> {
    let mut steps: Vec<Vec<Transition>> = runners.iter().map(|_| Vec::with_capacity(t)).collect();
    for step in 0..t {
        for (r, out) in runners.iter_mut().zip(steps.iter_mut()) {
            let emb = &tasks[r.task];
            let abort = |e: Error| Error::Rollout {
                env: emb.spec.name.clone(),
                step,
                detail: e.to_string(),
            };
            r.history.observe(r.episode.observation());
            let privileged = r.episode.privileged();
            let d = decode_action(
                model,
                &r.history.layout(),
                &emb.spec.space,
                &emb.trie,
                emb.codec.as_ref(),
                Some(&privileged),
                1.0,
                rng,
            )
            .map_err(abort)?;
            r.history.act(d.tokens.clone());
            let s = r.episode.step(&d.action).map_err(abort)?;
            if !d.logprob().is_finite() {
                return Err(abort(Error::NonFinite("action log-probability".into())));
            }
            r.episode_return += s.reward;
            out.push(Transition {
                layout: r.history.layout(),
                tokens: d.tokens.clone(),
                logprob: d.logprob(),
                entropy: d.mean_entropy(),
                reward: s.reward,
                done: s.done,
                value: unnormalized_value(model, popart, &d.value_features)?,
                features: d.value_features,
                privileged,
            });
            if s.done {
                r.completed.push(EpisodeOutcome {
                    success: s.success,
                    total_return: r.episode_return,
                    steps: r.episode.steps_taken(),
                });
                r.reset(emb, model)?;
            }
        }
    }
    let mut bootstrap = Vec::with_capacity(runners.len());
    for r in runners.iter() {
        let mut h = r.history.clone();
        h.observe(r.episode.observation());
        let layout = h.layout();
        let privileged = r.episode.privileged();
        let trunk = model.forward(&layout, None)?;
        let pos = layout.pre_action_position().expect("one group observed");
        let f = model.value_features(&trunk, pos, Some(&privileged))?;
        bootstrap.push(unnormalized_value(model, popart, &f)?);
    }
    Ok(RolloutBatch {
        tasks: runners.iter().map(|r| r.task).collect(),
        steps,
        bootstrap,
    })
}
