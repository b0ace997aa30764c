use serde::{Deserialize, Serialize};

use super::rollout::Transition;
use crate::error::{Error, Result};
use crate::numerics::loss::mse;
use crate::numerics::tensor::Tensor;
use crate::policy::{masked_token_stats, ActionTrie, LoraSettings, PolicyModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub gamma: f64,
    pub tau: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub entropy_coef: f64,
    /// Weight `λ` of the SFT term in the joint objective.
    pub sft_weight: f64,
    /// Adapters on a frozen trunk when set; full finetuning otherwise.
    pub lora: Option<LoraSettings>,
    pub rollout_len: usize,
    pub envs_per_task: usize,
    pub iterations: usize,
    /// Sum per-environment PPO losses (`true`) or average them.
    pub sum_env_losses: bool,
    pub sft_batch_size: usize,
    pub max_grad_norm: f64,
    pub popart_beta: f64,
    pub popart_sigma_min: f64,
    pub seed: u64,
}

impl PpoConfig {
    pub fn desk() -> Self {
        PpoConfig {
            gamma: 0.999,
            tau: 0.95,
            clip: 0.2,
            epochs: 2,
            minibatches: 6,
            policy_lr: 3e-4,
            value_lr: 1.5e-4,
            entropy_coef: 1e-4,
            sft_weight: 0.1,
            lora: Some(LoraSettings::desk()),
            rollout_len: 128,
            envs_per_task: 4,
            iterations: 50,
            sum_env_losses: true,
            sft_batch_size: 16,
            max_grad_norm: 1.0,
            popart_beta: 3e-4,
            popart_sigma_min: 1e-4,
            seed: 0,
        }
    }

    pub fn paper_echo() -> Self {
        PpoConfig {
            lora: Some(LoraSettings::paper_echo()),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must be in [0, 1], got {}", self.tau));
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip must be > 0, got {}", self.clip));
        }
        if self.epochs == 0 || self.minibatches == 0 || self.rollout_len == 0 || self.envs_per_task == 0 {
            return bad("epochs, minibatches, rollout length and envs per task must be >= 1".into());
        }
        if !(self.sft_weight >= 0.0) || !(self.entropy_coef >= 0.0) {
            return bad("sft weight and entropy coefficient must be >= 0".into());
        }
        if !(self.policy_lr >= 0.0) || !(self.value_lr >= 0.0) {
            return bad("learning rates must be >= 0".into());
        }
        Ok(())
    }
}

/// `min(ρA, clip(ρ, 1−ε, 1+ε)·A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// Derivative of [`clipped_surrogate`] with respect to the new log-probability.
pub fn clipped_surrogate_grad(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let unclipped = ratio * advantage;
    if unclipped <= ratio.clamp(1.0 - clip, 1.0 + clip) * advantage {
        unclipped
    } else {
        0.0
    }
}

/// One PPO training example.
#[derive(Clone, Copy, Debug)]
pub struct PpoSample<'a> {
    pub transition: &'a Transition,
    pub trie: &'a ActionTrie,
    /// Standardized advantage.
    pub advantage: f64,
    /// PopArt-normalized return target.
    pub target: f64,
    /// Weight of this sample in the policy loss.
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoLosses {
    pub policy_loss: f64,
    pub value_loss: f64,
    /// `entropy_coef ×` mean normalized entropy.
    pub entropy_bonus: f64,
    pub mean_entropy: f64,
    pub skipped: usize,
}

/// Per-sample weights: each environment's samples average to one loss term,
/// then the terms are summed (or averaged when `sum` is false).
pub fn env_weights(tasks: &[usize], sum: bool) -> Vec<f64> {
    let mut counts = std::collections::BTreeMap::new();
    for &t in tasks {
        *counts.entry(t).or_insert(0usize) += 1;
    }
    let groups = counts.len().max(1) as f64;
    tasks
        .iter()
        .map(|t| {
            let w = 1.0 / counts[t] as f64;
            if sum {
                w
            } else {
                w / groups
            }
        })
        .collect()
}

/// Clipped-surrogate policy loss, value MSE on normalized targets, and the
/// entropy bonus over `samples`. With `backward`, accumulates gradients of
/// `policy_loss + value_loss − entropy_bonus`; the value loss reaches only the
/// value head.
pub fn ppo_losses(
    model: &mut PolicyModel,
    samples: &[PpoSample],
    clip: f64,
    entropy_coef: f64,
    backward: bool,
) -> Result<PpoLosses> {
    let mut out = PpoLosses::default();
    if samples.is_empty() {
        return Ok(out);
    }
    let n = samples.len() as f64;
    let mut entropy_sum = 0.0;
    let mut features = Vec::with_capacity(samples.len());
    for s in samples {
        let tr = s.transition;
        features.extend_from_slice(&tr.features);
        let trunk = model.forward(&tr.layout, None)?;
        let targets = tr.layout.targets();
        if targets.iter().map(|t| t.1).ne(tr.tokens.iter().copied()) {
            return Err(Error::Internal("transition layout does not end with its action".into()));
        }
        let positions: Vec<usize> = targets.iter().map(|t| t.0).collect();
        let (logits, cache) = model.logits_at(&trunk.hidden, &positions)?;
        let mut cursor = s.trie.root();
        let mut stats = Vec::with_capacity(tr.tokens.len());
        for (i, &tok) in tr.tokens.iter().enumerate() {
            stats.push(masked_token_stats(logits.row(i), &s.trie.legal(&cursor), tok)?);
            cursor = s.trie.advance(&cursor, tok)?;
        }
        let new_lp: f64 = stats.iter().map(|st| st.logprob).sum();
        let k = stats.len().max(1) as f64;
        let entropy = stats.iter().map(|st| st.normalized_entropy).sum::<f64>() / k;
        let ratio = (new_lp - tr.logprob).exp();
        if !ratio.is_finite() {
            out.skipped += 1;
            continue;
        }
        out.policy_loss -= s.weight * clipped_surrogate(ratio, s.advantage, clip);
        entropy_sum += entropy;
        if backward {
            let g_lp = -s.weight * clipped_surrogate_grad(ratio, s.advantage, clip);
            let g_ent = -entropy_coef / n / k;
            let mut d_logits = Tensor::zeros(logits.shape());
            for (i, st) in stats.iter().enumerate() {
                for ((d, a), b) in d_logits.row_mut(i).iter_mut().zip(&st.d_logprob).zip(&st.d_entropy) {
                    *d = g_lp * a + g_ent * b;
                }
            }
            let mut d_hidden = Tensor::zeros(trunk.hidden.shape());
            model.logits_backward(&cache, &positions, &d_logits, &mut d_hidden);
            model.backward(&trunk.cache, &d_hidden);
        }
    }
    if out.skipped > 0 {
        log::warn!("skipped {} samples with non-finite probability ratio", out.skipped);
    }
    out.mean_entropy = entropy_sum / n;
    out.entropy_bonus = entropy_coef * out.mean_entropy;

    let x = Tensor::from_vec(&[samples.len(), features.len() / samples.len()], features)?;
    let y = Tensor::from_vec(&[samples.len(), 1], samples.iter().map(|s| s.target).collect())?;
    let (pred, cache) = model.value_head.forward(&x, None)?;
    let (vl, dv) = mse(&pred, &y)?;
    out.value_loss = vl;
    if backward {
        model.value_head.backward(&cache, &dv);
    }
    Ok(out)
}
