use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{dataset_sampler, sample_batch, sft_loss, sft_loss_and_grad, SftBatch, SftDataset};
use crate::agent::{run_episode, success_rate, Embodiment};
use crate::error::{Error, Result};
use crate::numerics::layers::Parameterized;
use crate::numerics::{clip_grad_norm, AdamW, AdamWConfig, LrSchedule};
use crate::policy::{is_value_param, save_checkpoint, PolicyCheckpoint, PolicyModel, TrainerState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub lr: f64,
    pub updates: u64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub context: usize,
    /// One sampling weight per dataset.
    pub weights: Vec<f64>,
    pub weight_decay: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub max_grad_norm: f64,
    pub log_every: u64,
    pub eval_every: u64,
    pub seed: u64,
}

impl SftConfig {
    pub fn desk() -> Self {
        SftConfig {
            lr: 1e-3,
            updates: 5000,
            warmup_fraction: 0.10,
            batch_size: 16,
            context: 3,
            weights: vec![1.0],
            weight_decay: 0.0,
            max_grad_norm: 1.0,
            log_every: 50,
            eval_every: 500,
            seed: 0,
        }
    }

    pub fn paper_echo() -> Self {
        SftConfig {
            lr: 1e-5,
            updates: 75_000,
            batch_size: 256,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("sft lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.context == 0 {
            return Err(Error::Config("sft batch size and context must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup fraction must be in [0, 1], got {}",
                self.warmup_fraction
            )));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || !self.weights.iter().any(|w| *w > 0.0) {
            return Err(Error::Config(format!(
                "dataset weights must be >= 0 and not all zero, got {:?}",
                self.weights
            )));
        }
        Ok(())
    }
}

/// One line of the SFT metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub update: u64,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub heldout_loss: Option<f64>,
    /// `(environment, greedy success rate)` pairs.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub success: Vec<(String, f64)>,
}

/// Periodic evaluation during training.
#[derive(Clone, Debug, Default)]
pub struct SftEval {
    pub embodiments: Vec<Embodiment>,
    pub seeds: Vec<u64>,
    pub heldout: Option<SftBatch>,
}

/// Everything about a run besides the hyperparameters.
#[derive(Clone, Debug, Default)]
pub struct SftRun {
    pub eval: SftEval,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<TrainerState>,
    /// Stop (and checkpoint) once this many updates are done.
    pub stop_after: Option<u64>,
}

fn evaluate(model: &PolicyModel, eval: &SftEval, update: u64, loss: f64, lr: f64) -> Result<SftRecord> {
    let heldout_loss = match &eval.heldout {
        Some(b) => Some(sft_loss(model, b)?),
        None => None,
    };
    let mut success = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(update);
    for emb in &eval.embodiments {
        if !eval.seeds.is_empty() {
            let s = success_rate(model, emb, eval.seeds.iter().copied(), 0.0, &mut rng)?;
            success.push((emb.spec.name.clone(), s));
        }
    }
    Ok(SftRecord {
        update,
        loss,
        lr,
        heldout_loss,
        success,
    })
}

fn write_checkpoint(model: &PolicyModel, state: TrainerState, run: &SftRun) -> Result<()> {
    if let Some(path) = &run.checkpoint {
        save_checkpoint(
            &PolicyCheckpoint {
                model: model.clone(),
                popart: None,
                trainer: Some(state),
            },
            path,
        )?;
    }
    Ok(())
}

/// Behavior cloning on the weighted dataset mixture with AdamW and a
/// warmup-cosine schedule. The value head is not trained.
pub fn train_sft(model: &mut PolicyModel, datasets: &[SftDataset], config: &SftConfig, run: &SftRun) -> Result<Vec<SftRecord>> {
    config.validate()?;
    dataset_sampler(datasets, &config.weights)?;
    let (mut update, mut rng, mut opt) = match &run.resume {
        Some(s) => (
            s.updates,
            s.rng.clone(),
            s.optimizers
                .first()
                .cloned()
                .ok_or_else(|| Error::Config("resume state has no optimizer".into()))?,
        ),
        None => (
            0,
            ChaCha8Rng::seed_from_u64(config.seed),
            AdamW::new(AdamWConfig {
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            }),
        ),
    };
    let schedule = LrSchedule {
        peak: config.lr,
        total_steps: config.updates,
        warmup_fraction: config.warmup_fraction,
    };
    let state = |u: u64, rng: &ChaCha8Rng, opt: &AdamW| TrainerState {
        updates: u,
        rng: rng.clone(),
        optimizers: vec![opt.clone()],
    };
    let mut log = Vec::new();
    let mut window = (0.0, 0u64);
    while update < config.updates {
        if run.stop_after.is_some_and(|s| update >= s) {
            break;
        }
        model.zero_grad();
        let batch = sample_batch(datasets, &config.weights, config.context, config.batch_size, &mut rng)?;
        let loss = sft_loss_and_grad(model, &batch, 1.0, Some(&mut rng))?;
        if !loss.is_finite() {
            write_checkpoint(model, state(update, &rng, &opt), run)?;
            return Err(Error::Divergence(format!("non-finite SFT loss at update {update}")));
        }
        if config.max_grad_norm > 0.0 {
            clip_grad_norm(model, config.max_grad_norm, &|n| !is_value_param(n));
        }
        let lr = schedule.lr_at(update);
        if let Err(e) = opt.step_filtered(model, lr, &|n| !is_value_param(n)) {
            write_checkpoint(model, state(update, &rng, &opt), run)?;
            return Err(match e {
                Error::NonFiniteGradient(p) => Error::Divergence(format!("non-finite gradient in `{p}` at update {update}")),
                e => e,
            });
        }
        update += 1;
        window.0 += loss;
        window.1 += 1;
        let at_eval = config.eval_every > 0 && update % config.eval_every == 0;
        let at_log = config.log_every > 0 && update % config.log_every == 0;
        if at_log || at_eval || update == config.updates {
            let mean = window.0 / window.1 as f64;
            window = (0.0, 0);
            let record = if at_eval || update == config.updates {
                let r = evaluate(model, &run.eval, update, mean, lr)?;
                write_checkpoint(model, state(update, &rng, &opt), run)?;
                r
            } else {
                SftRecord {
                    update,
                    loss: mean,
                    lr,
                    heldout_loss: None,
                    success: Vec::new(),
                }
            };
            log::info!("sft update {update}: loss {:.4}", record.loss);
            log.push(record);
        }
    }
    if update < config.updates {
        write_checkpoint(model, state(update, &rng, &opt), run)?;
    }
    Ok(log)
}

/// Outcome of the collection phase of success-filtered finetuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub rollouts: usize,
    pub kept: usize,
    pub env_steps: usize,
}

/// Samples episodes from seeds `first_seed..` until `step_budget`
/// environment steps are spent, keeps the successful ones, and fine-tunes on
/// them.
pub fn success_filtered_sft(
    model: &mut PolicyModel,
    emb: &Embodiment,
    step_budget: usize,
    first_seed: u64,
    config: &SftConfig,
    run: &SftRun,
) -> Result<(Vec<SftRecord>, FilterStats)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5f5f);
    let mut kept = Vec::new();
    let mut env_steps = 0;
    let mut rollouts = 0;
    while env_steps < step_budget {
        let r = run_episode(model, emb, first_seed + rollouts as u64, 1.0, &mut rng)?;
        env_steps += r.outcome.steps;
        rollouts += 1;
        if r.outcome.success {
            kept.push(r.trajectory);
        }
    }
    if kept.is_empty() {
        return Err(Error::NoSuccesses(rollouts));
    }
    let stats = FilterStats {
        rollouts,
        kept: kept.len(),
        env_steps,
    };
    let data = SftDataset::from_trajectories("success-filtered", &kept, emb, &model.vocab)?;
    let config = SftConfig {
        weights: vec![1.0],
        ..config.clone()
    };
    let log = train_sft(model, &[data], &config, run)?;
    Ok((log, stats))
}
