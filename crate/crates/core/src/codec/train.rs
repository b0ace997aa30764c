use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::save_codec;
use super::space::PaddedAction;
use super::{CodecConfig, RvqCodec};
use crate::error::{Error, Result};
use crate::numerics::layers::Parameterized;
use crate::numerics::loss::mse;
use crate::numerics::tensor::Tensor;
use crate::numerics::{AdamW, AdamWConfig, LrSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub updates: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Held-out evaluation (and checkpoint) cadence in updates.
    pub eval_every: u64,
    pub reseed_dead_codes: bool,
    pub checkpoint: Option<PathBuf>,
}

impl CodecTrainConfig {
    pub fn desk() -> Self {
        CodecTrainConfig {
            updates: 3000,
            batch_size: 64,
            lr: 1e-3,
            warmup_fraction: 0.10,
            weight_decay: 0.0,
            seed: 0,
            eval_every: 500,
            reseed_dead_codes: true,
            checkpoint: None,
        }
    }

    pub fn paper_echo() -> Self {
        CodecTrainConfig {
            updates: 15_000,
            batch_size: 256,
            ..Self::desk()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CodecHistory {
    /// Total loss (reconstruction + codebook + commitment) per update.
    pub train_loss: Vec<f64>,
    /// Reconstruction term per update.
    pub recon_loss: Vec<f64>,
    /// `(update, held-out per-dimension MSE)`.
    pub heldout: Vec<(u64, f64)>,
    pub reseeded_codes: u64,
}

/// Mean over samples of the per-dimension squared error of `decode(encode(a))`
/// on each sample's own dimensions.
pub fn heldout_mse(codec: &RvqCodec, data: &[PaddedAction]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("held-out set is empty".into()));
    }
    let mut total = 0.0;
    for a in data {
        let rec = codec.decode(&codec.encode(a)?, a.dim())?;
        let err: f64 = rec
            .iter()
            .zip(a.values())
            .map(|(r, v)| (r - v) * (r - v))
            .sum();
        total += err / a.dim() as f64;
    }
    Ok(total / data.len() as f64)
}

fn fit_normalization(codec: &mut RvqCodec, data: &[PaddedAction]) {
    let d = codec.config.max_action_dim;
    let n = data.len() as f64;
    let mut mean = vec![0.0; d];
    for a in data {
        for (m, v) in mean.iter_mut().zip(a.values()) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for a in data {
        for ((s, v), m) in var.iter_mut().zip(a.values()).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    codec.mean = mean.iter().map(|&m| m as f32 as f64).collect();
    codec.std = var
        .iter()
        .map(|&v| {
            let s = v.sqrt();
            if s < 1e-6 {
                1.0
            } else {
                s as f32 as f64
            }
        })
        .collect();
}

fn encode_batch(codec: &RvqCodec, data: &[PaddedAction], idx: &[usize]) -> Result<Tensor> {
    let d = codec.config.max_action_dim;
    let mut x = Tensor::zeros(&[idx.len(), d]);
    for (r, &i) in idx.iter().enumerate() {
        x.row_mut(r).copy_from_slice(&codec.normalize(data[i].values()));
    }
    Ok(x)
}

/// Seeds each level's codes with residuals of random training samples.
fn init_codebooks(codec: &mut RvqCodec, data: &[PaddedAction], rng: &mut ChaCha8Rng) -> Result<()> {
    let k = codec.config.codebook_size;
    let idx: Vec<usize> = (0..k).map(|_| rng.gen_range(0..data.len())).collect();
    let z = codec.encoder.apply(&encode_batch(codec, data, &idx)?)?;
    let mut residual = z;
    for m in 0..codec.levels() {
        let order: Vec<usize> = (0..k).map(|_| rng.gen_range(0..k)).collect();
        {
            let cb = &mut codec.codebooks[m].value;
            for (code, &src) in order.iter().enumerate() {
                cb.row_mut(code).copy_from_slice(residual.row(src));
            }
        }
        for r in 0..k {
            let c = codec.nearest_code(m, residual.row(r));
            let code = codec.codebooks[m].value.row(c).to_vec();
            for (v, cv) in residual.row_mut(r).iter_mut().zip(&code) {
                *v -= cv;
            }
        }
    }
    Ok(())
}

/// Trains a residual VQ-VAE on padded actions.
///
/// Loss per update is reconstruction MSE plus, for every level, the codebook
/// term `‖sg(r_{m-1}) − c‖²` and the weighted commitment term `‖z − sg(q_{≤m})‖²`.
/// Gradients reach the encoder through the quantizer by the straight-through
/// estimator.
pub fn train_codec(
    train: &[PaddedAction],
    heldout: &[PaddedAction],
    config: CodecConfig,
    tc: &CodecTrainConfig,
) -> Result<(RvqCodec, CodecHistory)> {
    if train.is_empty() {
        return Err(Error::Config("codec training set is empty".into()));
    }
    if tc.batch_size == 0 || tc.updates == 0 {
        return Err(Error::Config("codec batch size and updates must be >= 1".into()));
    }
    if let Some(a) = train.iter().find(|a| a.width() != config.max_action_dim) {
        return Err(Error::Config(format!(
            "training action width {} differs from codec width {}",
            a.width(),
            config.max_action_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut codec = RvqCodec::new(config, &mut rng)?;
    fit_normalization(&mut codec, train);
    init_codebooks(&mut codec, train, &mut rng)?;

    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: tc.weight_decay,
        ..Default::default()
    });
    let schedule = LrSchedule {
        peak: tc.lr,
        total_steps: tc.updates,
        warmup_fraction: tc.warmup_fraction,
    };
    let (levels, k, dc) = (codec.levels(), codec.config.codebook_size, codec.config.code_dim);
    let beta = codec.config.commitment;
    let epoch_steps = train.len().div_ceil(tc.batch_size).max(1) as u64;
    let mut usage = vec![vec![0u64; k]; levels];
    let mut history = CodecHistory::default();
    let mut last_good = codec.clone();

    for step in 1..=tc.updates {
        let idx: Vec<usize> = (0..tc.batch_size).map(|_| rng.gen_range(0..train.len())).collect();
        let x = encode_batch(&codec, train, &idx)?;
        let b = idx.len();
        codec.zero_grad();

        let (z, enc_cache) = codec.encoder.forward(&x, None)?;
        let mut zq = Tensor::zeros(&[b, dc]);
        let mut dz = Tensor::zeros(&[b, dc]);
        let mut vq_loss = 0.0;
        let norm = (b * dc) as f64;
        for r in 0..b {
            let q = codec.quantize(z.row(r))?;
            zq.row_mut(r).copy_from_slice(&q.quantized);
            for m in 0..levels {
                let km = q.indices[m];
                usage[m][km] += 1;
                let res = &q.residuals[m + 1];
                let sq: f64 = res.iter().map(|v| v * v).sum();
                vq_loss += (1.0 + beta) * sq / norm;
                // Commitment pulls z toward sg(q_{≤m}); z − q_{≤m} = r_m.
                for (g, v) in dz.row_mut(r).iter_mut().zip(res) {
                    *g += 2.0 * beta * v / norm;
                }
                let cg = codec.codebooks[m].grad.row_mut(km);
                for (g, v) in cg.iter_mut().zip(res) {
                    *g -= 2.0 * v / norm;
                }
            }
        }
        let (recon, dec_cache) = codec.decoder.forward(&zq, None)?;
        let (rec_loss, drecon) = mse(&recon, &x)?;
        let dzq = codec.decoder.backward(&dec_cache, &drecon);
        // Straight-through: the decoder's input gradient is passed to z unchanged.
        dz.add_assign(&dzq);
        codec.encoder.backward(&enc_cache, &dz);

        let loss = rec_loss + vq_loss;
        if !loss.is_finite() {
            return Err(divergence(&last_good, tc, step));
        }
        history.train_loss.push(loss);
        history.recon_loss.push(rec_loss);
        if let Err(e) = opt.step(&mut codec, schedule.lr_at(step)) {
            log::warn!("codec update {step} rejected: {e}");
            return Err(divergence(&last_good, tc, step));
        }

        if tc.reseed_dead_codes && step % epoch_steps == 0 && step < tc.updates {
            history.reseeded_codes += reseed_dead(&mut codec, &mut opt, &usage, &z, &mut rng)?;
            usage.iter_mut().for_each(|u| u.iter_mut().for_each(|c| *c = 0));
        }
        if step % tc.eval_every == 0 || step == tc.updates {
            if !heldout.is_empty() {
                let m = heldout_mse(&codec, heldout)?;
                log::info!("codec update {step}: loss {loss:.5} held-out mse {m:.5}");
                history.heldout.push((step, m));
            }
            last_good = codec.clone();
            if let Some(path) = &tc.checkpoint {
                let mut snap = codec.clone();
                snap.round_to_f32();
                save_codec(&snap, path)?;
            }
        }
    }
    codec.round_to_f32();
    if let Some((_, m)) = history.heldout.last_mut() {
        if !heldout.is_empty() {
            *m = heldout_mse(&codec, heldout)?;
        }
    }
    Ok((codec, history))
}

fn divergence(last_good: &RvqCodec, tc: &CodecTrainConfig, step: u64) -> Error {
    let mut where_saved = String::from("no checkpoint path configured");
    if let Some(path) = &tc.checkpoint {
        let mut snap = last_good.clone();
        snap.round_to_f32();
        where_saved = match save_codec(&snap, path) {
            Ok(()) => format!("last good codec saved to {}", path.display()),
            Err(e) => format!("saving last good codec failed: {e}"),
        };
    }
    Error::Divergence(format!("codec loss became non-finite at update {step}; {where_saved}"))
}

/// Re-seeds codes that were never selected since the last reset to residuals of
/// random latents from the current batch.
fn reseed_dead(
    codec: &mut RvqCodec,
    opt: &mut AdamW,
    usage: &[Vec<u64>],
    batch_latents: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<u64> {
    let mut count = 0;
    let b = batch_latents.rows();
    for m in 0..codec.levels() {
        let dead: Vec<usize> = (0..usage[m].len()).filter(|&c| usage[m][c] == 0).collect();
        if dead.is_empty() {
            continue;
        }
        let name = format!("codebook.{m}");
        for c in dead {
            let src = rng.gen_range(0..b);
            let q = codec.quantize(batch_latents.row(src))?;
            let target = q.residuals[m].clone();
            codec.codebooks[m].value.row_mut(c).copy_from_slice(&target);
            if let Some(mom) = opt.moments.get_mut(&name) {
                mom.first.row_mut(c).iter_mut().for_each(|v| *v = 0.0);
                mom.second.row_mut(c).iter_mut().for_each(|v| *v = 0.0);
            }
            count += 1;
        }
    }
    Ok(count)
}
