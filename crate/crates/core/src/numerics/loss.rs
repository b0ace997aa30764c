use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Numerically stable log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

/// Mean cross-entropy over rows, with gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let (n, v) = (logits.rows(), logits.cols());
    if targets.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{n} rows but {} targets", targets.len()),
        ));
    }
    let mut grad = Tensor::zeros(&[n, v]);
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("target {t} outside {v} classes"),
            ));
        }
        let ls = log_softmax(logits.row(i));
        loss -= ls[t];
        let g = grad.row_mut(i);
        for j in 0..v {
            g[j] = ls[j].exp() / n as f64;
        }
        g[t] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, grad))
}

/// Mean squared error over all elements.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mse",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = 0.0;
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}
