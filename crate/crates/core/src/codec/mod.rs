//! Multi-embodiment continuous-action tokenizer: a residual VQ-VAE over padded
//! action vectors whose code indices map into a reserved token-id range.

mod io;
mod space;
pub mod synthetic;
mod train;

pub use io::{load_codec, save_codec, CODEC_MAGIC, CODEC_VERSION};
pub use space::{pad, truncate, ActionKind, ActionSpaceSpec, PaddedAction, D_MAX};
pub use train::{heldout_mse, train_codec, CodecHistory, CodecTrainConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::{join, Param, Parameterized};
use crate::numerics::tensor::Tensor;
use crate::numerics::{Activation, Sequential};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Number of residual levels `M`.
    pub levels: usize,
    /// Codes per codebook `K`.
    pub codebook_size: usize,
    pub code_dim: usize,
    pub max_action_dim: usize,
    /// First reserved token id.
    pub token_base: u32,
    pub hidden: usize,
    /// Affine layers in the encoder (the decoder mirrors it).
    pub layers: usize,
    pub commitment: f64,
    /// All levels share one `K`-wide id range; otherwise level `m` uses
    /// `[base + m·K, base + (m+1)·K)`.
    pub shared_token_range: bool,
}

impl CodecConfig {
    pub fn desk() -> Self {
        CodecConfig {
            levels: 2,
            codebook_size: 512,
            code_dim: 64,
            max_action_dim: D_MAX,
            token_base: 256,
            hidden: 256,
            layers: 4,
            commitment: 1.0,
            shared_token_range: true,
        }
    }

    pub fn paper_echo() -> Self {
        CodecConfig {
            code_dim: 1024,
            hidden: 4096,
            token_base: 30000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.codebook_size == 0 || self.code_dim == 0 {
            return Err(Error::Config("codec levels, codebook size and code dim must be >= 1".into()));
        }
        if self.layers < 1 {
            return Err(Error::Config("codec needs at least one affine layer".into()));
        }
        if self.max_action_dim == 0 {
            return Err(Error::Config("max action dim must be >= 1".into()));
        }
        Ok(())
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.max_action_dim];
        w.extend(std::iter::repeat(self.hidden).take(self.layers - 1));
        w.push(self.code_dim);
        w
    }

    pub fn decoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.code_dim];
        w.extend(std::iter::repeat(self.hidden).take(self.layers - 1));
        w.push(self.max_action_dim);
        w
    }

    /// Number of distinct reserved ids.
    pub fn token_span(&self) -> u32 {
        if self.shared_token_range {
            self.codebook_size as u32
        } else {
            (self.levels * self.codebook_size) as u32
        }
    }

    pub fn token_range(&self) -> std::ops::Range<u32> {
        self.token_base..self.token_base + self.token_span()
    }

    pub fn level_range(&self, level: usize) -> std::ops::Range<u32> {
        let k = self.codebook_size as u32;
        let lo = if self.shared_token_range {
            self.token_base
        } else {
            self.token_base + level as u32 * k
        };
        lo..lo + k
    }
}

/// Exactly `M` reserved token ids, in level order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ActionTokenSeq(pub Vec<u32>);

/// Result of greedy residual quantization of one latent.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub indices: Vec<usize>,
    /// `residuals[0]` is the latent; `residuals[m]` is what remains after level `m`.
    pub residuals: Vec<Vec<f64>>,
    /// Sum of the selected codes.
    pub quantized: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RvqCodec {
    pub config: CodecConfig,
    pub encoder: Sequential,
    pub decoder: Sequential,
    /// One `[K, code_dim]` table per level.
    pub codebooks: Vec<Param>,
    /// Per-dimension input standardization.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl RvqCodec {
    pub fn new<R: Rng + ?Sized>(config: CodecConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = Sequential::mlp(&config.encoder_widths(), Activation::Gelu, rng);
        let decoder = Sequential::mlp(&config.decoder_widths(), Activation::Gelu, rng);
        let codebooks = (0..config.levels)
            .map(|_| Param::new(Tensor::randn(&[config.codebook_size, config.code_dim], 0.1, rng)))
            .collect();
        let d = config.max_action_dim;
        let mut codec = RvqCodec {
            config,
            encoder,
            decoder,
            codebooks,
            mean: vec![0.0; d],
            std: vec![1.0; d],
        };
        codec.round_to_f32();
        Ok(codec)
    }

    /// Assembles a codec from explicit parts, checking every shape invariant.
    pub fn from_parts(
        config: CodecConfig,
        encoder: Sequential,
        decoder: Sequential,
        codebooks: Vec<Tensor>,
        mean: Vec<f64>,
        std: Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        let bad = |d: String| Error::shape("codec", d);
        if encoder.input_dim() != Some(config.max_action_dim) || encoder.output_dim() != Some(config.code_dim) {
            return Err(bad("encoder must map max_action_dim -> code_dim".into()));
        }
        if decoder.input_dim() != Some(config.code_dim) || decoder.output_dim() != Some(config.max_action_dim) {
            return Err(bad("decoder must map code_dim -> max_action_dim".into()));
        }
        if codebooks.len() != config.levels {
            return Err(bad(format!("{} codebooks for {} levels", codebooks.len(), config.levels)));
        }
        for cb in &codebooks {
            if cb.shape() != [config.codebook_size, config.code_dim] {
                return Err(bad(format!("codebook shape {:?}", cb.shape())));
            }
        }
        if mean.len() != config.max_action_dim || std.len() != config.max_action_dim {
            return Err(bad("normalization statistics have the wrong width".into()));
        }
        if std.iter().any(|s| !(*s > 0.0)) {
            return Err(bad("standard deviations must be positive".into()));
        }
        Ok(RvqCodec {
            config,
            encoder,
            decoder,
            codebooks: codebooks.into_iter().map(Param::new).collect(),
            mean,
            std,
        })
    }

    pub fn levels(&self) -> usize {
        self.config.levels
    }

    pub fn normalize(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    /// Encoder output for one padded action.
    pub fn latent(&self, action: &PaddedAction) -> Result<Vec<f64>> {
        if action.width() != self.config.max_action_dim {
            return Err(Error::shape(
                "codec",
                format!("action width {} but codec expects {}", action.width(), self.config.max_action_dim),
            ));
        }
        let x = Tensor::from_vec(&[1, action.width()], self.normalize(action.values()))?;
        Ok(self.encoder.apply(&x)?.into_data())
    }

    /// Index of the code nearest to `target` in `level` (lowest index on ties).
    pub fn nearest_code(&self, level: usize, target: &[f64]) -> usize {
        let cb = &self.codebooks[level].value;
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.config.codebook_size {
            let d: f64 = cb.row(k).iter().zip(target).map(|(c, t)| (t - c) * (t - c)).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Greedy residual quantization of a latent.
    pub fn quantize(&self, latent: &[f64]) -> Result<Quantized> {
        if latent.len() != self.config.code_dim {
            return Err(Error::shape(
                "codec",
                format!("latent width {} but code dim is {}", latent.len(), self.config.code_dim),
            ));
        }
        if latent.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codec latent".into()));
        }
        let mut residuals = vec![latent.to_vec()];
        let mut indices = Vec::with_capacity(self.levels());
        let mut quantized = vec![0.0; latent.len()];
        for m in 0..self.levels() {
            let r = residuals.last().expect("non-empty");
            let k = self.nearest_code(m, r);
            let code = self.codebooks[m].value.row(k);
            let next: Vec<f64> = r.iter().zip(code).map(|(a, c)| a - c).collect();
            for (q, c) in quantized.iter_mut().zip(code) {
                *q += c;
            }
            indices.push(k);
            residuals.push(next);
        }
        Ok(Quantized {
            indices,
            residuals,
            quantized,
        })
    }

    pub fn index_to_token(&self, level: usize, index: usize) -> u32 {
        self.config.level_range(level).start + index as u32
    }

    pub fn token_to_index(&self, position: usize, id: u32) -> Result<usize> {
        let range = self.config.level_range(position);
        if !range.contains(&id) {
            return Err(Error::TokenOutOfRange {
                position,
                id,
                lo: range.start,
                hi: range.end,
            });
        }
        Ok((id - range.start) as usize)
    }

    pub fn encode(&self, action: &PaddedAction) -> Result<ActionTokenSeq> {
        let z = self.latent(action)?;
        let q = self.quantize(&z)?;
        Ok(ActionTokenSeq(
            q.indices
                .iter()
                .enumerate()
                .map(|(m, &k)| self.index_to_token(m, k))
                .collect(),
        ))
    }

    /// Convenience: pad, then encode.
    pub fn encode_raw(&self, action: &[f64], embodiment: &str) -> Result<ActionTokenSeq> {
        self.encode(&pad(action, self.config.max_action_dim, embodiment)?)
    }

    /// Decoded full-width vector (in action units) for a token sequence.
    pub fn decode_padded(&self, tokens: &ActionTokenSeq) -> Result<Vec<f64>> {
        if tokens.0.len() != self.levels() {
            return Err(Error::shape(
                "codec",
                format!("expected {} action tokens, got {}", self.levels(), tokens.0.len()),
            ));
        }
        let mut z = vec![0.0; self.config.code_dim];
        for (m, &id) in tokens.0.iter().enumerate() {
            let k = self.token_to_index(m, id)?;
            for (zi, c) in z.iter_mut().zip(self.codebooks[m].value.row(k)) {
                *zi += c;
            }
        }
        let zt = Tensor::from_vec(&[1, z.len()], z)?;
        let out = self.decoder.apply(&zt)?;
        Ok(self.denormalize(out.data()))
    }

    pub fn decode(&self, tokens: &ActionTokenSeq, d: usize) -> Result<Vec<f64>> {
        truncate(&self.decode_padded(tokens)?, d)
    }
}

impl Parameterized for RvqCodec {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        self.decoder.visit_params(&join(prefix, "decoder"), f);
        for (m, cb) in self.codebooks.iter().enumerate() {
            f(&join(prefix, &format!("codebook.{m}")), cb);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder.visit_params_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_params_mut(&join(prefix, "decoder"), f);
        for (m, cb) in self.codebooks.iter_mut().enumerate() {
            f(&join(prefix, &format!("codebook.{m}")), cb);
        }
    }
}
