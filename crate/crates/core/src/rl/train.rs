use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gae::{compute_gae, standardize};
use super::ppo::{env_weights, ppo_losses, PpoConfig, PpoLosses, PpoSample};
use super::rollout::{collect_rollouts, EnvRunner};
use super::PopArtStats;
use crate::agent::Embodiment;
use crate::error::{Error, Result};
use crate::numerics::layers::Parameterized;
use crate::numerics::{clip_grad_norm, AdamW, AdamWConfig};
use crate::policy::{is_value_param, save_checkpoint, PolicyCheckpoint, PolicyModel};
use crate::sft::{sample_batch, sft_loss_and_grad, SftConfig, SftDataset};

/// One line of the RL metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlRecord {
    pub iter: u64,
    pub env: String,
    pub mean_return: f64,
    pub success: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub popart_mu: f64,
    pub popart_sigma: f64,
}

/// Run options besides the hyperparameters.
#[derive(Clone, Debug, Default)]
pub struct RlRun {
    /// First episode seed; runner `i` uses `first_seed + i + k·runners`.
    pub first_seed: u64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlOutcome {
    pub log: Vec<RlRecord>,
    pub popart: PopArtStats,
    pub env_steps: u64,
}

const COLLAPSE_FACTOR: f64 = 0.5;
const COLLAPSE_PATIENCE: usize = 3;

fn save(model: &PolicyModel, popart: &PopArtStats, run: &RlRun) -> Result<()> {
    if let Some(path) = &run.checkpoint {
        save_checkpoint(
            &PolicyCheckpoint {
                model: model.clone(),
                popart: Some(*popart),
                trainer: None,
            },
            path,
        )?;
    }
    Ok(())
}

/// Alternates on-policy collection over `tasks` with PPO updates on
/// `Σ_envs L_PPO + λ·L_SFT`, where the SFT term samples `datasets` with
/// `sft.weights`. In adapter mode only the adapters and the value head train.
pub fn train_rl(
    model: &mut PolicyModel,
    tasks: &[Embodiment],
    datasets: &[SftDataset],
    ppo: &PpoConfig,
    sft: &SftConfig,
    run: &RlRun,
) -> Result<RlOutcome> {
    ppo.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("RL needs at least one environment".into()));
    }
    let use_sft = ppo.sft_weight > 0.0 && !datasets.is_empty();
    if use_sft {
        sft.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ppo.seed);
    match ppo.lora {
        Some(settings) => {
            if model.lora.is_none() {
                model.attach_lora(settings, &mut rng)?;
            }
            model.freeze_base();
        }
        None => model.unfreeze_all(),
    }
    let mut popart = PopArtStats::new(ppo.popart_beta, ppo.popart_sigma_min);
    let n_runners = (tasks.len() * ppo.envs_per_task) as u64;
    let mut runners = Vec::new();
    for (task, emb) in tasks.iter().enumerate() {
        for j in 0..ppo.envs_per_task {
            let i = (task * ppo.envs_per_task + j) as u64;
            runners.push(EnvRunner::new(task, emb, model, run.first_seed + i, n_runners)?);
        }
    }
    let mut policy_opt = AdamW::new(AdamWConfig::default());
    let mut value_opt = AdamW::new(AdamWConfig::default());
    let mut log = Vec::new();
    let mut env_steps = 0u64;
    let mut best = vec![0.0f64; tasks.len()];
    let mut collapsed = vec![0usize; tasks.len()];

    for iter in 0..ppo.iterations as u64 {
        let batch = collect_rollouts(model, tasks, &mut runners, ppo.rollout_len, &popart, &mut rng)?;
        env_steps += batch.len() as u64;

        let mut advantages = Vec::with_capacity(batch.len());
        let mut returns = Vec::with_capacity(batch.len());
        for (steps, &boot) in batch.steps.iter().zip(&batch.bootstrap) {
            let rewards: Vec<f64> = steps.iter().map(|s| s.reward).collect();
            let values: Vec<f64> = steps.iter().map(|s| s.value).collect();
            let dones: Vec<bool> = steps.iter().map(|s| s.done).collect();
            let (a, r) = compute_gae(&rewards, &values, &dones, boot, ppo.gamma, ppo.tau);
            advantages.extend(a);
            returns.extend(r);
        }
        let head = model
            .value_head
            .last_affine_mut()
            .ok_or_else(|| Error::Internal("value head has no affine layer".into()))?;
        popart.update(&returns, head)?;
        standardize(&mut advantages);

        let mut flat = Vec::with_capacity(batch.len());
        for (r, steps) in batch.steps.iter().enumerate() {
            for tr in steps {
                flat.push((batch.tasks[r], tr));
            }
        }
        let mut order: Vec<usize> = (0..flat.len()).collect();
        let mb_size = flat.len().div_ceil(ppo.minibatches);
        let mut totals = vec![PpoLosses::default(); tasks.len()];
        let mut counts = vec![0usize; tasks.len()];
        for _ in 0..ppo.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(mb_size) {
                let chunk_tasks: Vec<usize> = chunk.iter().map(|&i| flat[i].0).collect();
                let weights = env_weights(&chunk_tasks, ppo.sum_env_losses);
                let samples: Vec<PpoSample> = chunk
                    .iter()
                    .zip(&weights)
                    .map(|(&i, &w)| PpoSample {
                        transition: flat[i].1,
                        trie: &tasks[flat[i].0].trie,
                        advantage: advantages[i],
                        target: popart.normalize(returns[i]),
                        weight: w,
                    })
                    .collect();
                model.zero_grad();
                let l = ppo_losses(model, &samples, ppo.clip, ppo.entropy_coef, true)?;
                for &t in &chunk_tasks {
                    counts[t] += 1;
                }
                for (task, tot) in totals.iter_mut().enumerate() {
                    let share = chunk_tasks.iter().filter(|&&t| t == task).count() as f64;
                    if share > 0.0 {
                        tot.policy_loss += l.policy_loss * share;
                        tot.value_loss += l.value_loss * share;
                        tot.mean_entropy += l.mean_entropy * share;
                    }
                }
                if use_sft {
                    let sb = sample_batch(datasets, &sft.weights, sft.context, ppo.sft_batch_size, &mut rng)?;
                    sft_loss_and_grad(model, &sb, ppo.sft_weight, None)?;
                }
                if ppo.max_grad_norm > 0.0 {
                    clip_grad_norm(model, ppo.max_grad_norm, &|n| !is_value_param(n));
                    clip_grad_norm(model, ppo.max_grad_norm, &is_value_param);
                }
                let stepped = policy_opt
                    .step_filtered(model, ppo.policy_lr, &|n| !is_value_param(n))
                    .and_then(|_| value_opt.step_filtered(model, ppo.value_lr, &is_value_param));
                if let Err(e) = stepped {
                    save(model, &popart, run)?;
                    return Err(Error::Divergence(format!("RL iteration {iter}: {e}")));
                }
            }
        }

        let mut outcomes = vec![Vec::new(); tasks.len()];
        for r in runners.iter_mut() {
            outcomes[r.task].extend(r.drain_completed());
        }
        for (task, emb) in tasks.iter().enumerate() {
            let done = &outcomes[task];
            let (mean_return, success) = if done.is_empty() {
                (0.0, 0.0)
            } else {
                let n = done.len() as f64;
                (
                    done.iter().map(|o| o.total_return).sum::<f64>() / n,
                    done.iter().filter(|o| o.success).count() as f64 / n,
                )
            };
            let c = counts[task].max(1) as f64;
            let record = RlRecord {
                iter,
                env: emb.spec.name.clone(),
                mean_return,
                success,
                policy_loss: totals[task].policy_loss / c,
                value_loss: totals[task].value_loss / c,
                entropy: totals[task].mean_entropy / c,
                popart_mu: popart.mu,
                popart_sigma: popart.sigma(),
            };
            log::info!(
                "rl iter {iter} {}: success {:.3} return {:.3}",
                record.env,
                record.success,
                record.mean_return
            );
            if success < COLLAPSE_FACTOR * best[task] {
                collapsed[task] += 1;
                if collapsed[task] == COLLAPSE_PATIENCE {
                    log::warn!(
                        "success on {} collapsed below half of its best {:.3} for {COLLAPSE_PATIENCE} iterations",
                        record.env,
                        best[task]
                    );
                    save(model, &popart, run)?;
                }
            } else {
                collapsed[task] = 0;
            }
            best[task] = best[task].max(success);
            log.push(record);
        }
    }
    save(model, &popart, run)?;
    Ok(RlOutcome { log, popart, env_steps })
}
