//! Feed-forward composition of the supported layer set.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::attention::{AttentionCache, CausalSelfAttention};
use super::layers::{join, Activation, LayerNorm, LayerNormCache, Linear, LinearCache, Param, Parameterized};
use super::loss::{mse, softmax_cross_entropy};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Affine(Linear),
    Activation(Activation),
    LayerNorm(LayerNorm),
    Attention(CausalSelfAttention),
}

impl Layer {
    fn kind(&self) -> &'static str {
        match self {
            Layer::Affine(_) => "affine",
            Layer::Activation(Activation::Gelu) => "gelu",
            Layer::Activation(Activation::Relu) => "relu",
            Layer::LayerNorm(_) => "layer_norm",
            Layer::Attention(_) => "attention",
        }
    }
}

#[derive(Clone, Debug)]
enum LayerCache {
    Affine(LinearCache),
    Activation(Tensor),
    LayerNorm(LayerNormCache),
    Attention(AttentionCache),
}

#[derive(Clone, Debug)]
pub struct SequentialCache(Vec<LayerCache>);

/// Scalar objective attached to the graph output.
#[derive(Clone, Debug)]
pub enum Objective {
    /// Mean softmax cross-entropy against class indices, one per row.
    CrossEntropy(Vec<usize>),
    /// Mean squared error against a target of the output's shape.
    MeanSquared(Tensor),
    /// `½‖y‖²`.
    HalfSquaredNorm,
}

#[derive(Clone, Debug)]
pub struct ForwardBackward {
    pub output: Tensor,
    pub loss: f64,
    pub input_grad: Tensor,
}

/// A chain of layers applied in order.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    /// Affine layers of the given widths with `act` between them (none after the last).
    pub fn mlp<R: Rng + ?Sized>(widths: &[usize], act: Activation, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            layers.push(Layer::Affine(Linear::new(w[0], w[1], true, rng)));
            if i + 2 < widths.len() {
                layers.push(Layer::Activation(act));
            }
        }
        Sequential { layers }
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::Affine(a) => Some(a.in_dim()),
            Layer::LayerNorm(n) => Some(n.dim()),
            Layer::Attention(a) => Some(a.dim()),
            Layer::Activation(_) => None,
        })
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            Layer::Affine(a) => Some(a.out_dim()),
            Layer::LayerNorm(n) => Some(n.dim()),
            Layer::Attention(a) => Some(a.dim()),
            Layer::Activation(_) => None,
        })
    }

    /// Widths of the affine chain: input followed by each affine output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::new();
        for l in &self.layers {
            if let Layer::Affine(a) = l {
                if w.is_empty() {
                    w.push(a.in_dim());
                }
                w.push(a.out_dim());
            }
        }
        w
    }

    pub fn last_affine_mut(&mut self) -> Option<&mut Linear> {
        self.layers.iter_mut().rev().find_map(|l| match l {
            Layer::Affine(a) => Some(a),
            _ => None,
        })
    }

    pub fn last_affine(&self) -> Option<&Linear> {
        self.layers.iter().rev().find_map(|l| match l {
            Layer::Affine(a) => Some(a),
            _ => None,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, SequentialCache)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let named = |e: Error| match e {
                Error::Shape { detail, .. } => {
                    Error::shape(format!("layer {i} ({})", layer.kind()), detail)
                }
                other => other,
            };
            let (next, cache) = match layer {
                Layer::Affine(l) => {
                    let (y, c) = l.forward(&h, rng.as_deref_mut()).map_err(named)?;
                    (y, LayerCache::Affine(c))
                }
                Layer::Activation(a) => (a.forward(&h), LayerCache::Activation(h)),
                Layer::LayerNorm(n) => {
                    let (y, c) = n.forward(&h).map_err(named)?;
                    (y, LayerCache::LayerNorm(c))
                }
                Layer::Attention(a) => {
                    let (y, c) = a.forward(&h, rng.as_deref_mut()).map_err(named)?;
                    (y, LayerCache::Attention(c))
                }
            };
            caches.push(cache);
            h = next;
        }
        Ok((h, SequentialCache(caches)))
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, None)?.0)
    }

    pub fn backward(&mut self, cache: &SequentialCache, dy: &Tensor) -> Tensor {
        let mut g = dy.clone();
        for (layer, c) in self.layers.iter_mut().zip(&cache.0).rev() {
            g = match (layer, c) {
                (Layer::Affine(l), LayerCache::Affine(c)) => l.backward(c, &g),
                (Layer::Activation(a), LayerCache::Activation(x)) => a.backward(x, &g),
                (Layer::LayerNorm(n), LayerCache::LayerNorm(c)) => n.backward(c, &g),
                (Layer::Attention(a), LayerCache::Attention(c)) => a.backward(c, &g),
                _ => unreachable!("cache built by forward of the same graph"),
            };
        }
        g
    }

    /// Runs the graph, evaluates `objective`, and back-propagates into every
    /// parameter gradient (accumulating) and the input.
    pub fn forward_backward(&mut self, x: &Tensor, objective: &Objective) -> Result<ForwardBackward> {
        let (output, cache) = self.forward(x, None)?;
        let (loss, dy) = match objective {
            Objective::CrossEntropy(t) => softmax_cross_entropy(&output, t)?,
            Objective::MeanSquared(t) => mse(&output, t)?,
            Objective::HalfSquaredNorm => {
                let l = 0.5 * output.data().iter().map(|v| v * v).sum::<f64>();
                (l, output.clone())
            }
        };
        let input_grad = self.backward(&cache, &dy);
        Ok(ForwardBackward {
            output,
            loss,
            input_grad,
        })
    }
}

impl Parameterized for Sequential {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, l) in self.layers.iter().enumerate() {
            let p = join(prefix, &i.to_string());
            match l {
                Layer::Affine(a) => a.visit_params(&p, f),
                Layer::LayerNorm(n) => n.visit_params(&p, f),
                Layer::Attention(a) => a.visit_params(&p, f),
                Layer::Activation(_) => {}
            }
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &i.to_string());
            match l {
                Layer::Affine(a) => a.visit_params_mut(&p, f),
                Layer::LayerNorm(n) => n.visit_params_mut(&p, f),
                Layer::Attention(a) => a.visit_params_mut(&p, f),
                Layer::Activation(_) => {}
            }
        }
    }
}
