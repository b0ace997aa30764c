use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{axpy, gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// Frozen parameters receive no gradient and are skipped by optimizers.
    pub frozen: bool,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            value,
            grad,
            frozen: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns named parameters.
pub trait Parameterized {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.visit_params_mut("", &mut |_, p| p.frozen = frozen);
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.len());
        n
    }

    /// Rounds every parameter to `f32` precision.
    fn round_to_f32(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.value.round_to_f32());
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Low-rank additive update `ΔW = scale · up · down` on a wrapped [`Linear`].
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// `[rank, in]`, random init.
    pub down: Param,
    /// `[out, rank]`, zero init.
    pub up: Param,
    pub scale: f64,
    pub dropout: f64,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.down.value.shape()[0]
    }

    /// Dense `ΔW` with shape `[out, in]`.
    pub fn delta(&self) -> Tensor {
        let r = self.rank();
        let out = self.up.value.shape()[0];
        let inp = self.down.value.shape()[1];
        let mut d = Tensor::zeros(&[out, inp]);
        gemm_nn(
            self.up.value.data(),
            self.down.value.data(),
            d.data_mut(),
            out,
            r,
            inp,
        );
        d.scale(self.scale);
        d
    }
}

/// Affine map `y = x Wᵀ + b` with `W: [out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
    pub lora: Option<LoraAdapter>,
}

#[derive(Clone, Debug)]
pub struct LinearCache {
    input: Tensor,
    lora: Option<LoraCache>,
}

#[derive(Clone, Debug)]
struct LoraCache {
    dropped: Tensor,
    hidden: Tensor,
    keep_mask: Option<Vec<bool>>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        Linear {
            weight: Param::new(Tensor::randn(&[out_dim, in_dim], std, rng)),
            bias: bias.then(|| Param::new(Tensor::zeros(&[out_dim]))),
            lora: None,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Linear {
            weight: Param::new(Tensor::zeros(&[out_dim, in_dim])),
            bias: bias.then(|| Param::new(Tensor::zeros(&[out_dim]))),
            lora: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(
        &self,
        x: &Tensor,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, LinearCache)> {
        let (n, k, m) = (x.rows(), x.cols(), self.out_dim());
        if k != self.in_dim() {
            return Err(Error::shape(
                "affine",
                format!("expected input width {}, got {k}", self.in_dim()),
            ));
        }
        let mut y = Tensor::zeros(&[n, m]);
        gemm_nt(x.data(), self.weight.value.data(), y.data_mut(), n, k, m);
        if let Some(b) = &self.bias {
            for i in 0..n {
                axpy(1.0, b.value.data(), y.row_mut(i));
            }
        }
        let lora = match &self.lora {
            None => None,
            Some(ad) => {
                let r = ad.rank();
                let mut dropped = x.clone();
                let mut keep_mask = None;
                if ad.dropout > 0.0 {
                    if let Some(rng) = rng.as_deref_mut() {
                        let keep = 1.0 - ad.dropout;
                        let mut mask = Vec::with_capacity(dropped.len());
                        for v in dropped.data_mut() {
                            let kept = rng.gen::<f64>() < keep;
                            *v = if kept { *v / keep } else { 0.0 };
                            mask.push(kept);
                        }
                        keep_mask = Some(mask);
                    }
                }
                let mut h = Tensor::zeros(&[n, r]);
                gemm_nt(dropped.data(), ad.down.value.data(), h.data_mut(), n, k, r);
                let mut upd = Tensor::zeros(&[n, m]);
                gemm_nt(h.data(), ad.up.value.data(), upd.data_mut(), n, r, m);
                axpy(ad.scale, upd.data(), y.data_mut());
                Some(LoraCache {
                    dropped,
                    hidden: h,
                    keep_mask,
                })
            }
        };
        Ok((
            y,
            LinearCache {
                input: x.clone(),
                lora,
            },
        ))
    }

    /// Inference-only forward.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, None)?.0)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &LinearCache, dy: &Tensor) -> Tensor {
        let x = &cache.input;
        let (n, k, m) = (x.rows(), x.cols(), self.out_dim());
        if !self.weight.frozen {
            gemm_tn(dy.data(), x.data(), self.weight.grad.data_mut(), n, m, k);
        }
        if let Some(b) = &mut self.bias {
            if !b.frozen {
                for i in 0..n {
                    axpy(1.0, dy.row(i), b.grad.data_mut());
                }
            }
        }
        let mut dx = Tensor::zeros(&[n, k]);
        gemm_nn(dy.data(), self.weight.value.data(), dx.data_mut(), n, m, k);
        if let (Some(ad), Some(lc)) = (&mut self.lora, &cache.lora) {
            let (dropped, h) = (&lc.dropped, &lc.hidden);
            let r = ad.rank();
            let mut dys = dy.clone();
            dys.scale(ad.scale);
            if !ad.up.frozen {
                gemm_tn(dys.data(), h.data(), ad.up.grad.data_mut(), n, m, r);
            }
            let mut dh = Tensor::zeros(&[n, r]);
            gemm_nn(dys.data(), ad.up.value.data(), dh.data_mut(), n, m, r);
            if !ad.down.frozen {
                gemm_tn(dh.data(), dropped.data(), ad.down.grad.data_mut(), n, r, k);
            }
            let mut dxd = Tensor::zeros(&[n, k]);
            gemm_nn(dh.data(), ad.down.value.data(), dxd.data_mut(), n, r, k);
            if let Some(mask) = &lc.keep_mask {
                let keep = 1.0 - ad.dropout;
                for (g, &kept) in dxd.data_mut().iter_mut().zip(mask) {
                    *g = if kept { *g / keep } else { 0.0 };
                }
            }
            dx.add_assign(&dxd);
        }
        dx
    }

    pub fn attach_lora<R: Rng + ?Sized>(
        &mut self,
        rank: usize,
        alpha: f64,
        dropout: f64,
        rng: &mut R,
    ) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::AdaptersAttached);
        }
        if rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        let std = 1.0 / (self.in_dim() as f64).sqrt();
        self.lora = Some(LoraAdapter {
            down: Param::new(Tensor::randn(&[rank, self.in_dim()], std, rng)),
            up: Param::new(Tensor::zeros(&[self.out_dim(), rank])),
            scale: alpha / rank as f64,
            dropout,
        });
        Ok(())
    }

    /// Folds the adapter into the base weight and removes it.
    pub fn merge_lora(&mut self) {
        if let Some(ad) = self.lora.take() {
            self.weight.value.add_assign(&ad.delta());
        }
    }
}

impl Parameterized for Linear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
        if let Some(ad) = &self.lora {
            f(&join(prefix, "lora_down"), &ad.down);
            f(&join(prefix, "lora_up"), &ad.up);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
        if let Some(ad) = &mut self.lora {
            f(&join(prefix, "lora_down"), &mut ad.down);
            f(&join(prefix, "lora_up"), &mut ad.up);
        }
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        let mut g = Tensor::zeros(&[dim]);
        g.fill(1.0);
        LayerNorm {
            gamma: Param::new(g),
            beta: Param::new(Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        let d = self.dim();
        if x.cols() != d {
            return Err(Error::shape(
                "layer_norm",
                format!("expected width {d}, got {}", x.cols()),
            ));
        }
        let n = x.rows();
        let mut xhat = Tensor::zeros(&[n, d]);
        let mut y = Tensor::zeros(&[n, d]);
        let mut inv_std = Vec::with_capacity(n);
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(i);
            for j in 0..d {
                xh[j] = (row[j] - mean) * is;
            }
            let yr = y.row_mut(i);
            for j in 0..d {
                yr[j] = xhat.data()[i * d + j] * g[j] + b[j];
            }
        }
        Ok((y, LayerNormCache { xhat, inv_std }))
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Tensor) -> Tensor {
        let d = self.dim();
        let n = dy.rows();
        let mut dx = Tensor::zeros(&[n, d]);
        let g = self.gamma.value.data().to_vec();
        for i in 0..n {
            let dyr = dy.row(i);
            let xh = cache.xhat.row(i);
            if !self.gamma.frozen {
                let gg = self.gamma.grad.data_mut();
                for j in 0..d {
                    gg[j] += dyr[j] * xh[j];
                }
            }
            if !self.beta.frozen {
                axpy(1.0, dyr, self.beta.grad.data_mut());
            }
            let mut mean_dxh = 0.0;
            let mut mean_dxh_xh = 0.0;
            for j in 0..d {
                let dxh = dyr[j] * g[j];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[j];
            }
            mean_dxh /= d as f64;
            mean_dxh_xh /= d as f64;
            let is = cache.inv_std[i];
            let dxr = dx.row_mut(i);
            for j in 0..d {
                dxr[j] = is * (dyr[j] * g[j] - mean_dxh - xh[j] * mean_dxh_xh);
            }
        }
        dx
    }
}

impl Parameterized for LayerNorm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
        }
    }

    pub fn forward(self, x: &Tensor) -> Tensor {
        let data = x.data().iter().map(|&v| self.apply(v)).collect();
        Tensor::from_vec(x.shape(), data).expect("same shape")
    }

    /// `x` is the pre-activation input saved from the forward pass.
    pub fn backward(self, x: &Tensor, dy: &Tensor) -> Tensor {
        let data = x
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&v, &g)| g * self.derivative(v))
            .collect();
        Tensor::from_vec(x.shape(), data).expect("same shape")
    }
}

/// Token embedding table `[vocab, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub table: Param,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(vocab: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        Embedding {
            table: Param::new(Tensor::randn(&[vocab, dim], std, rng)),
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.value.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.value.shape()[1]
    }

    pub fn lookup(&self, id: u32) -> Result<&[f64]> {
        if id as usize >= self.vocab() {
            return Err(Error::shape(
                "embedding",
                format!("id {id} outside vocabulary of {}", self.vocab()),
            ));
        }
        Ok(self.table.value.row(id as usize))
    }

    pub fn forward(&self, ids: &[u32]) -> Result<Tensor> {
        let d = self.dim();
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.lookup(id)?);
        }
        Ok(out)
    }

    /// Scatter-adds `dy` rows into the table gradient.
    pub fn backward(&mut self, ids: &[u32], dy: &Tensor) {
        if self.table.frozen {
            return;
        }
        for (i, &id) in ids.iter().enumerate() {
            axpy(1.0, dy.row(i), self.table.grad.row_mut(id as usize));
        }
    }
}

impl Parameterized for Embedding {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "table"), &self.table);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "table"), &mut self.table);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn affine_quadratic_gradient_is_outer_product() {
        // y = W x, loss = ½‖y‖², dL/dW = y xᵀ.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::new(3, 2, false, &mut rng);
        let x = Tensor::from_vec(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let (y, cache) = lin.forward(&x, None).unwrap();
        lin.backward(&cache, &y);
        for o in 0..2 {
            for i in 0..3 {
                let expect = y.data()[o] * x.data()[i];
                assert_eq!(lin.weight.grad.data()[o * 3 + i], expect);
            }
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lin = Linear::new(4, 3, true, &mut rng);
        let x = Tensor::zeros(&[2, 4]);
        let (y, cache) = lin.forward(&x, None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let mut dy = Tensor::zeros(&[2, 3]);
        dy.fill(1.0);
        lin.backward(&cache, &dy);
        // dW = dyᵀ x vanishes when x = 0.
        assert!(lin.weight.grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_reports_shape_mismatch() {
        let lin = Linear::zeros(4, 3, true);
        let err = lin.forward(&Tensor::zeros(&[1, 5]), None).unwrap_err();
        assert!(err.to_string().contains("affine"));
    }

    #[test]
    fn double_attach_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lin = Linear::new(4, 3, true, &mut rng);
        lin.attach_lora(2, 4.0, 0.0, &mut rng).unwrap();
        assert!(matches!(
            lin.attach_lora(2, 4.0, 0.0, &mut rng),
            Err(Error::AdaptersAttached)
        ));
    }

    #[test]
    fn activations_match_reference_points() {
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
        assert!((Activation::Gelu.apply(10.0) - 10.0).abs() < 1e-9);
    }
}
