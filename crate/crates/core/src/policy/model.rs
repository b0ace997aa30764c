use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layout::{FlatSequence, SequenceLayout, OBS_CHUNK};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::attention::AttentionCache;
use crate::numerics::layers::{join, LayerNormCache, LinearCache, Param, Parameterized};
use crate::numerics::tensor::{axpy, Tensor};
use crate::numerics::{Activation, CausalSelfAttention, Embedding, LayerNorm, Linear, Sequential};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `dim`.
    pub mlp_ratio: usize,
    pub max_len: usize,
    pub value_hidden: usize,
    /// Affine layers in the value head.
    pub value_layers: usize,
    pub privileged_dim: usize,
    /// Maximum observation groups in one sequence.
    pub context: usize,
    pub seed: u64,
}

impl PolicyConfig {
    pub fn desk() -> Self {
        PolicyConfig {
            dim: 64,
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
            max_len: 64,
            value_hidden: 64,
            value_layers: 4,
            privileged_dim: crate::envs::PRIVILEGED_DIM,
            context: 3,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.layers == 0 || self.mlp_ratio == 0 {
            return bad("policy dim, layers and mlp_ratio must be >= 1".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("policy dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.context == 0 {
            return bad("context must hold at least one observation".into());
        }
        if self.value_layers < 2 || self.value_hidden == 0 {
            return bad("value head needs >= 2 layers and a positive width".into());
        }
        if self.max_len < 2 {
            return bad("max_len must be >= 2".into());
        }
        Ok(())
    }

    pub fn value_input_dim(&self) -> usize {
        2 * self.dim + self.privileged_dim
    }
}

/// Low-rank adapter settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSettings {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl LoraSettings {
    pub fn desk() -> Self {
        LoraSettings {
            rank: 8,
            alpha: 16.0,
            dropout: 0.0,
        }
    }

    pub fn paper_echo() -> Self {
        LoraSettings {
            rank: 128,
            alpha: 32.0,
            dropout: 0.1,
        }
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: CausalSelfAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    fc1: LinearCache,
    pre: Tensor,
    fc2: LinearCache,
}

impl Block {
    fn new(dim: usize, heads: usize, ratio: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::new(dim),
            attn: CausalSelfAttention::new(dim, heads, rng)?,
            ln2: LayerNorm::new(dim),
            fc1: Linear::new(dim, ratio * dim, true, rng),
            fc2: Linear::new(ratio * dim, dim, true, rng),
        })
    }

    fn forward(&self, x: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<(Tensor, BlockCache)> {
        let (a, ln1) = self.ln1.forward(x)?;
        let (att, attn) = self.attn.forward(&a, rng.as_deref_mut())?;
        let mut h = x.clone();
        h.add_assign(&att);
        let (b, ln2) = self.ln2.forward(&h)?;
        let (pre, fc1) = self.fc1.forward(&b, rng.as_deref_mut())?;
        let g = Activation::Gelu.forward(&pre);
        let (m, fc2) = self.fc2.forward(&g, rng)?;
        h.add_assign(&m);
        Ok((
            h,
            BlockCache {
                ln1,
                attn,
                ln2,
                fc1,
                pre,
                fc2,
            },
        ))
    }

    fn backward(&mut self, cache: &BlockCache, dy: &Tensor) -> Tensor {
        let dg = self.fc2.backward(&cache.fc2, dy);
        let du = Activation::Gelu.backward(&cache.pre, &dg);
        let db = self.fc1.backward(&cache.fc1, &du);
        let mut dh = dy.clone();
        dh.add_assign(&self.ln2.backward(&cache.ln2, &db));
        let da = self.attn.backward(&cache.attn, &dh);
        dh.add_assign(&self.ln1.backward(&cache.ln1, &da));
        dh
    }

    fn adapted_mut(&mut self) -> [&mut Linear; 6] {
        let [q, k, v, o] = self.attn.projections_mut();
        [q, k, v, o, &mut self.fc1, &mut self.fc2]
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.ln1.visit_params(&join(prefix, "ln1"), f);
        self.attn.visit_params(&join(prefix, "attn"), f);
        self.ln2.visit_params(&join(prefix, "ln2"), f);
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.ln1.visit_params_mut(&join(prefix, "ln1"), f);
        self.attn.visit_params_mut(&join(prefix, "attn"), f);
        self.ln2.visit_params_mut(&join(prefix, "ln2"), f);
        self.fc1.visit_params_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_params_mut(&join(prefix, "fc2"), f);
    }
}

/// Causal sequence model over text and action tokens with interleaved
/// observation embeddings, plus a value head.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel {
    pub config: PolicyConfig,
    pub vocab: Vocabulary,
    pub embed: Embedding,
    pub pos: Param,
    pub obs_proj: Linear,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Linear,
    pub value_head: Sequential,
    pub lora: Option<LoraSettings>,
}

/// Saved activations of one trunk forward pass.
#[derive(Clone, Debug)]
pub struct TrunkCache {
    tokens: Vec<u32>,
    obs_slots: Vec<usize>,
    obs: LinearCache,
    blocks: Vec<BlockCache>,
    ln_f: LayerNormCache,
}

/// Final hidden states `[len, dim]` and projected observations `[groups, dim]`.
#[derive(Clone, Debug)]
pub struct Trunk {
    pub hidden: Tensor,
    pub obs_embeddings: Tensor,
    pub obs_slots: Vec<usize>,
    pub cache: TrunkCache,
}

impl PolicyModel {
    pub fn new(config: PolicyConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let blocks = (0..config.layers)
            .map(|_| Block::new(d, config.heads, config.mlp_ratio, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let embed = Embedding::new(vocab.size(), d, 0.1, &mut rng);
        let pos = Param::new(Tensor::randn(&[config.max_len, d], 0.02, &mut rng));
        let obs_proj = Linear::new(OBS_CHUNK, d, true, &mut rng);
        let head = Linear::new(d, vocab.size(), true, &mut rng);
        let mut widths = vec![config.value_input_dim()];
        widths.extend(std::iter::repeat(config.value_hidden).take(config.value_layers - 1));
        widths.push(1);
        let mut value_head = Sequential::mlp(&widths, Activation::Gelu, &mut rng);
        if let Some(last) = value_head.last_affine_mut() {
            *last = Linear::zeros(last.in_dim(), 1, true);
        }
        Ok(PolicyModel {
            config,
            vocab,
            embed,
            pos,
            obs_proj,
            blocks,
            ln_f: LayerNorm::new(d),
            head,
            value_head,
            lora: None,
        })
    }

    pub fn flatten(&self, layout: &SequenceLayout) -> Result<FlatSequence> {
        let flat = layout.flatten(self.vocab.observation_id());
        if flat.tokens.len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: flat.tokens.len(),
                max: self.config.max_len,
            });
        }
        Ok(flat)
    }

    /// Runs the embedding and transformer stack over the whole sequence.
    pub fn forward(&self, layout: &SequenceLayout, rng: Option<&mut ChaCha8Rng>) -> Result<Trunk> {
        let flat = self.flatten(layout)?;
        self.forward_flat(&flat, rng)
    }

    pub fn forward_flat(&self, flat: &FlatSequence, mut rng: Option<&mut ChaCha8Rng>) -> Result<Trunk> {
        let len = flat.tokens.len();
        if len == 0 || len > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len,
                max: self.config.max_len,
            });
        }
        let d = self.config.dim;
        let mut x = self.embed.forward(&flat.tokens)?;
        axpy(1.0, &self.pos.value.data()[..len * d], x.data_mut());
        let mut obs_in = Tensor::zeros(&[flat.obs.len(), OBS_CHUNK]);
        for (i, o) in flat.obs.iter().enumerate() {
            obs_in.row_mut(i).copy_from_slice(o);
        }
        let (obs_embeddings, obs_cache) = self.obs_proj.forward(&obs_in, rng.as_deref_mut())?;
        for (i, &slot) in flat.obs_slots.iter().enumerate() {
            axpy(1.0, obs_embeddings.row(i), x.row_mut(slot));
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&x, rng.as_deref_mut())?;
            caches.push(c);
            x = y;
        }
        let (hidden, ln_f) = self.ln_f.forward(&x)?;
        Ok(Trunk {
            hidden,
            obs_embeddings,
            obs_slots: flat.obs_slots.clone(),
            cache: TrunkCache {
                tokens: flat.tokens.clone(),
                obs_slots: flat.obs_slots.clone(),
                obs: obs_cache,
                blocks: caches,
                ln_f,
            },
        })
    }

    /// Accumulates parameter gradients given `d hidden`.
    pub fn backward(&mut self, cache: &TrunkCache, d_hidden: &Tensor) {
        let mut dx = self.ln_f.backward(&cache.ln_f, d_hidden);
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dx = b.backward(c, &dx);
        }
        self.embed.backward(&cache.tokens, &dx);
        if !self.pos.frozen {
            let n = dx.len();
            axpy(1.0, dx.data(), &mut self.pos.grad.data_mut()[..n]);
        }
        let mut d_obs = Tensor::zeros(&[cache.obs_slots.len(), self.config.dim]);
        for (i, &slot) in cache.obs_slots.iter().enumerate() {
            d_obs.row_mut(i).copy_from_slice(dx.row(slot));
        }
        self.obs_proj.backward(&cache.obs, &d_obs);
    }

    /// Language-model logits `[positions, vocab]` at the given positions.
    pub fn logits_at(&self, hidden: &Tensor, positions: &[usize]) -> Result<(Tensor, LinearCache)> {
        let d = self.config.dim;
        let mut rows = Tensor::zeros(&[positions.len(), d]);
        for (i, &p) in positions.iter().enumerate() {
            rows.row_mut(i).copy_from_slice(hidden.row(p));
        }
        self.head.forward(&rows, None)
    }

    /// Back-propagates `d logits` through the head, scattering into `d_hidden`.
    pub fn logits_backward(
        &mut self,
        cache: &LinearCache,
        positions: &[usize],
        d_logits: &Tensor,
        d_hidden: &mut Tensor,
    ) {
        let d_rows = self.head.backward(cache, d_logits);
        for (i, &p) in positions.iter().enumerate() {
            axpy(1.0, d_rows.row(i), d_hidden.row_mut(p));
        }
    }

    /// Value-head input: hidden state at `position`, mean projected
    /// observation, and privileged features (zero when absent). Treated as a
    /// constant by the value loss.
    pub fn value_features(&self, trunk: &Trunk, position: usize, privileged: Option<&[f64]>) -> Result<Vec<f64>> {
        let d = self.config.dim;
        let mut f = Vec::with_capacity(self.config.value_input_dim());
        f.extend_from_slice(trunk.hidden.row(position));
        let used: Vec<usize> = (0..trunk.obs_slots.len())
            .filter(|&i| trunk.obs_slots[i] <= position)
            .collect();
        let mut pooled = vec![0.0; d];
        for &i in &used {
            axpy(1.0 / used.len() as f64, trunk.obs_embeddings.row(i), &mut pooled);
        }
        f.extend(pooled);
        let p = self.config.privileged_dim;
        match privileged {
            Some(v) if v.len() > p => {
                return Err(Error::shape(
                    "value head",
                    format!("{} privileged features exceed {p}", v.len()),
                ))
            }
            Some(v) => {
                f.extend_from_slice(v);
                f.resize(self.config.value_input_dim(), 0.0);
            }
            None => f.resize(self.config.value_input_dim(), 0.0),
        }
        Ok(f)
    }

    /// Normalized value prediction for a batch of feature rows.
    pub fn value_batch(&self, features: &Tensor) -> Result<Vec<f64>> {
        Ok(self.value_head.apply(features)?.into_data())
    }

    /// Normalized value at the final group's observation position.
    pub fn value(&self, layout: &SequenceLayout, privileged: Option<&[f64]>) -> Result<f64> {
        if layout.groups.is_empty() {
            return Err(Error::Config("value needs at least one observation group".into()));
        }
        let trunk = self.forward(layout, None)?;
        let pos = *trunk.obs_slots.last().expect("non-empty groups");
        let f = self.value_features(&trunk, pos, privileged)?;
        Ok(self.value_batch(&Tensor::from_vec(&[1, f.len()], f)?)?[0])
    }

    /// Adds adapters to every attention and feed-forward projection.
    pub fn attach_lora(&mut self, settings: LoraSettings, rng: &mut impl Rng) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::AdaptersAttached);
        }
        for b in &mut self.blocks {
            for l in b.adapted_mut() {
                l.attach_lora(settings.rank, settings.alpha, settings.dropout, rng)?;
            }
        }
        self.lora = Some(settings);
        Ok(())
    }

    /// Folds adapters into the base weights and removes them.
    pub fn merge_lora(&mut self) {
        for b in &mut self.blocks {
            for l in b.adapted_mut() {
                l.merge_lora();
            }
        }
        self.lora = None;
    }

    /// Freezes everything except adapters and the value head.
    pub fn freeze_base(&mut self) {
        self.visit_params_mut("", &mut |name, p| {
            p.frozen = !(is_adapter(name) || is_value_param(name));
        });
    }

    pub fn unfreeze_all(&mut self) {
        self.set_frozen(false);
    }

    /// Checksum over every base (non-adapter, non-value) parameter.
    pub fn base_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        self.visit_params("", &mut |name, p| {
            if !is_adapter(name) && !is_value_param(name) {
                h = (h ^ p.value.checksum()).wrapping_mul(0x0100_0000_01b3);
            }
        });
        h
    }
}

pub fn is_adapter(name: &str) -> bool {
    name.contains("lora_")
}

pub fn is_value_param(name: &str) -> bool {
    name.starts_with("value.")
}

impl Parameterized for PolicyModel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.embed.visit_params(&join(prefix, "embed"), f);
        f(&join(prefix, "pos"), &self.pos);
        self.obs_proj.visit_params(&join(prefix, "obs_proj"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.visit_params(&join(prefix, "ln_f"), f);
        self.head.visit_params(&join(prefix, "head"), f);
        self.value_head.visit_params(&join(prefix, "value"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.embed.visit_params_mut(&join(prefix, "embed"), f);
        f(&join(prefix, "pos"), &mut self.pos);
        self.obs_proj.visit_params_mut(&join(prefix, "obs_proj"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.visit_params_mut(&join(prefix, "ln_f"), f);
        self.head.visit_params_mut(&join(prefix, "head"), f);
        self.value_head.visit_params_mut(&join(prefix, "value"), f);
    }
}
