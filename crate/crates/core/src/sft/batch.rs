use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::trajectory::Trajectory;
use crate::agent::Embodiment;
use crate::error::{Error, Result};
use crate::numerics::loss::log_softmax;
use crate::numerics::layers::LinearCache;
use crate::numerics::tensor::Tensor;
use crate::policy::{PolicyModel, Trunk, SequenceLayout, StepGroup, Vocabulary};

/// A trajectory with its prompt, instruction, and actions already tokenized.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedTrajectory {
    pub prompt: Vec<u32>,
    pub instruction: Vec<u32>,
    pub steps: Vec<StepGroup>,
    pub success: bool,
}

impl TokenizedTrajectory {
    /// Layout over steps `start..=end`, whose last group carries the targets.
    pub fn span(&self, start: usize, end: usize) -> SequenceLayout {
        SequenceLayout {
            prompt: self.prompt.clone(),
            instruction: self.instruction.clone(),
            groups: self.steps[start..=end].to_vec(),
        }
    }
}

/// Named collection of tokenized trajectories for one embodiment.
#[derive(Clone, Debug, PartialEq)]
pub struct SftDataset {
    pub name: String,
    pub episodes: Vec<TokenizedTrajectory>,
}

impl SftDataset {
    pub fn from_trajectories(
        name: &str,
        trajectories: &[Trajectory],
        emb: &Embodiment,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let mut episodes = Vec::with_capacity(trajectories.len());
        for t in trajectories {
            if t.domain != emb.spec.domain() {
                return Err(Error::Config(format!(
                    "trajectory `{}` has domain `{}` but dataset `{name}` is for `{}`",
                    t.id,
                    t.domain,
                    emb.spec.domain()
                )));
            }
            let steps = t
                .steps
                .iter()
                .map(|s| {
                    Ok(StepGroup {
                        obs: s.obs.clone(),
                        action: emb.action_tokens(&s.action, vocab)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            episodes.push(TokenizedTrajectory {
                prompt: emb.prompt.clone(),
                instruction: vocab.tokenize(&t.instruction)?,
                steps,
                success: t.success,
            });
        }
        Ok(SftDataset {
            name: name.to_string(),
            episodes,
        })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }
}

/// Training sequences with the dataset each was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct SftBatch {
    pub layouts: Vec<SequenceLayout>,
    pub sources: Vec<usize>,
}

/// Validated sampling weights over datasets.
pub fn dataset_sampler(datasets: &[SftDataset], weights: &[f64]) -> Result<WeightedIndex<f64>> {
    if datasets.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} dataset weights given for {} datasets",
            weights.len(),
            datasets.len()
        )));
    }
    for (d, &w) in datasets.iter().zip(weights) {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::Config(format!("dataset `{}` has invalid weight {w}", d.name)));
        }
        if w > 0.0 && d.is_empty() {
            return Err(Error::Config(format!("dataset `{}` is empty but has weight {w}", d.name)));
        }
    }
    WeightedIndex::new(weights).map_err(|e| Error::Config(format!("dataset weights: {e}")))
}

/// Draws `batch_size` spans: dataset by weight, trajectory uniformly, span end
/// uniformly, then up to `context` steps ending there.
pub fn sample_batch(
    datasets: &[SftDataset],
    weights: &[f64],
    context: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SftBatch> {
    if context == 0 {
        return Err(Error::Config("context length must be at least 1".into()));
    }
    let sampler = dataset_sampler(datasets, weights)?;
    let mut batch = SftBatch {
        layouts: Vec::with_capacity(batch_size),
        sources: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        let d = sampler.sample(rng);
        let ds = &datasets[d];
        let ep = &ds.episodes[rng.gen_range(0..ds.len())];
        if ep.steps.is_empty() {
            return Err(Error::Config(format!("dataset `{}` contains an empty trajectory", ds.name)));
        }
        let end = rng.gen_range(0..ep.steps.len());
        let start = (end + 1).saturating_sub(context);
        batch.layouts.push(ep.span(start, end));
        batch.sources.push(d);
    }
    Ok(batch)
}

struct SequenceNll {
    nll: f64,
    trunk: Trunk,
    positions: Vec<usize>,
    head_cache: LinearCache,
    /// Gradient of `nll` with respect to the target-position logits.
    d_logits: Tensor,
}

fn sequence_nll(model: &PolicyModel, layout: &SequenceLayout, rng: Option<&mut ChaCha8Rng>) -> Result<SequenceNll> {
    let targets = layout.targets();
    if targets.is_empty() {
        return Err(Error::Config("training layout has no target tokens".into()));
    }
    let trunk = model.forward(layout, rng)?;
    let positions: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let (logits, head_cache) = model.logits_at(&trunk.hidden, &positions)?;
    let mut nll = 0.0;
    let mut d_logits = Tensor::zeros(logits.shape());
    for (i, &(_, tok)) in targets.iter().enumerate() {
        let lp = log_softmax(logits.row(i));
        nll -= lp[tok as usize];
        let row = d_logits.row_mut(i);
        for (g, l) in row.iter_mut().zip(&lp) {
            *g = l.exp();
        }
        row[tok as usize] -= 1.0;
    }
    Ok(SequenceNll {
        nll,
        trunk,
        positions,
        head_cache,
        d_logits,
    })
}

/// Mean over the batch of `−Σ log p(target | prefix)`.
pub fn sft_loss(model: &PolicyModel, batch: &SftBatch) -> Result<f64> {
    let mut total = 0.0;
    for l in &batch.layouts {
        total += sequence_nll(model, l, None)?.nll;
    }
    Ok(total / batch.layouts.len().max(1) as f64)
}

/// As [`sft_loss`], also accumulating `weight ·` its gradient into the model.
/// A zero weight contributes no gradient at all.
pub fn sft_loss_and_grad(
    model: &mut PolicyModel,
    batch: &SftBatch,
    weight: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<f64> {
    let n = batch.layouts.len().max(1) as f64;
    let mut total = 0.0;
    for l in &batch.layouts {
        let mut s = sequence_nll(model, l, rng.as_deref_mut())?;
        total += s.nll;
        if weight != 0.0 {
            s.d_logits.data_mut().iter_mut().for_each(|g| *g *= weight / n);
            let mut d_hidden = Tensor::zeros(s.trunk.hidden.shape());
            model.logits_backward(&s.head_cache, &s.positions, &s.d_logits, &mut d_hidden);
            model.backward(&s.trunk.cache, &d_hidden);
        }
    }
    Ok(total / n)
}
