use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layers::{join, Linear, LinearCache, Param, Parameterized};
use super::tensor::{axpy, dot, Tensor};
use crate::error::{Error, Result};

/// Multi-head causal self-attention over a single sequence `[len, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalSelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    q_cache: LinearCache,
    k_cache: LinearCache,
    v_cache: LinearCache,
    o_cache: LinearCache,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Row-major attention weights, one `[len, len]` block per head.
    probs: Vec<f64>,
}

impl CausalSelfAttention {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(CausalSelfAttention {
            query: Linear::new(dim, dim, true, rng),
            key: Linear::new(dim, dim, true, rng),
            value: Linear::new(dim, dim, true, rng),
            output: Linear::new(dim, dim, true, rng),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.query.in_dim()
    }

    pub fn projections_mut(&mut self) -> [&mut Linear; 4] {
        [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.output,
        ]
    }

    pub fn forward(
        &self,
        x: &Tensor,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, AttentionCache)> {
        let d = self.dim();
        if x.cols() != d {
            return Err(Error::shape(
                "attention",
                format!("expected width {d}, got {}", x.cols()),
            ));
        }
        let len = x.rows();
        let (q, q_cache) = self.query.forward(x, rng.as_deref_mut())?;
        let (k, k_cache) = self.key.forward(x, rng.as_deref_mut())?;
        let (v, v_cache) = self.value.forward(x, rng.as_deref_mut())?;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; self.heads * len * len];
        let mut mixed = Tensor::zeros(&[len, d]);
        for h in 0..self.heads {
            let off = h * dh;
            for i in 0..len {
                let qi = &q.row(i)[off..off + dh];
                let p = &mut probs[(h * len + i) * len..(h * len + i + 1) * len];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let s = dot(qi, &k.row(j)[off..off + dh]) * scale;
                    p[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for pj in p.iter_mut().take(i + 1) {
                    *pj = (*pj - max).exp();
                    z += *pj;
                }
                for pj in p.iter_mut().take(i + 1) {
                    *pj /= z;
                }
                let orow = &mut mixed.row_mut(i)[off..off + dh];
                for j in 0..=i {
                    axpy(p[j], &v.row(j)[off..off + dh], orow);
                }
            }
        }
        let (out, o_cache) = self.output.forward(&mixed, rng)?;
        Ok((
            out,
            AttentionCache {
                q_cache,
                k_cache,
                v_cache,
                o_cache,
                q,
                k,
                v,
                probs,
            },
        ))
    }

    pub fn backward(&mut self, cache: &AttentionCache, dy: &Tensor) -> Tensor {
        let d = self.dim();
        let len = dy.rows();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dmixed = self.output.backward(&cache.o_cache, dy);
        let mut dq = Tensor::zeros(&[len, d]);
        let mut dk = Tensor::zeros(&[len, d]);
        let mut dv = Tensor::zeros(&[len, d]);
        let mut dp = vec![0.0; len];
        for h in 0..self.heads {
            let off = h * dh;
            for i in 0..len {
                let p = &cache.probs[(h * len + i) * len..(h * len + i + 1) * len];
                let dout = &dmixed.row(i)[off..off + dh];
                let mut inner = 0.0;
                for j in 0..=i {
                    dp[j] = dot(dout, &cache.v.row(j)[off..off + dh]);
                    inner += p[j] * dp[j];
                    axpy(p[j], dout, &mut dv.row_mut(j)[off..off + dh]);
                }
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - inner) * scale;
                    if ds != 0.0 {
                        axpy(ds, &cache.k.row(j)[off..off + dh], &mut dq.row_mut(i)[off..off + dh]);
                        axpy(ds, &cache.q.row(i)[off..off + dh], &mut dk.row_mut(j)[off..off + dh]);
                    }
                }
            }
        }
        let mut dx = self.query.backward(&cache.q_cache, &dq);
        dx.add_assign(&self.key.backward(&cache.k_cache, &dk));
        dx.add_assign(&self.value.backward(&cache.v_cache, &dv));
        dx
    }
}

impl Parameterized for CausalSelfAttention {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.query.visit_params(&join(prefix, "query"), f);
        self.key.visit_params(&join(prefix, "key"), f);
        self.value.visit_params(&join(prefix, "value"), f);
        self.output.visit_params(&join(prefix, "output"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.query.visit_params_mut(&join(prefix, "query"), f);
        self.key.visit_params_mut(&join(prefix, "key"), f);
        self.value.visit_params_mut(&join(prefix, "value"), f);
        self.output.visit_params_mut(&join(prefix, "output"), f);
    }
}
