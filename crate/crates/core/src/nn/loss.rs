use super::tensor::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Predictions are clamped to `[CLAMP, 1 - CLAMP]` before taking logs.
pub const CLAMP: f64 = 1e-7;

/// Pixel likelihood of the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Likelihood {
    Bernoulli,
    /// Fixed-variance Gaussian.
    Gaussian {
        sigma: f64,
    },
}

impl Likelihood {
    /// Loss summed over pixels and averaged over the batch, and its gradient.
    pub fn nll(&self, x_hat: &Tensor, x: &Tensor) -> Result<(f64, Tensor)> {
        match self {
            Likelihood::Bernoulli => bernoulli_nll(x_hat, x),
            Likelihood::Gaussian { sigma } => gaussian_nll(x_hat, x, *sigma),
        }
    }

    /// Per-pixel negative log-likelihood (no batch averaging).
    pub fn pixel_nll(&self, x_hat: f64, x: f64) -> f64 {
        match self {
            Likelihood::Bernoulli => {
                let p = x_hat.clamp(CLAMP, 1.0 - CLAMP);
                -(x * p.ln() + (1.0 - x) * (1.0 - p).ln())
            }
            Likelihood::Gaussian { sigma } => {
                let t = (x - x_hat) / sigma;
                0.5 * t * t + sigma.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln()
            }
        }
    }
}

fn check(x_hat: &Tensor, x: &Tensor) -> Result<()> {
    if x_hat.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            x_hat.shape(),
            x.shape()
        )));
    }
    if x_hat.batch() == 0 {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    Ok(())
}

/// `-Σ [x ln x̂ + (1-x) ln(1-x̂)]` over pixels, averaged over the batch.
pub fn bernoulli_nll(x_hat: &Tensor, x: &Tensor) -> Result<(f64, Tensor)> {
    check(x_hat, x)?;
    if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!(
            "bernoulli target {v} outside [0, 1]"
        )));
    }
    let inv_b = 1.0 / x.batch() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(x.len());
    for (&q, &t) in x_hat.data().iter().zip(x.data()) {
        let p = q.clamp(CLAMP, 1.0 - CLAMP);
        total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        let g = if q == p {
            -(t / p - (1.0 - t) / (1.0 - p))
        } else {
            0.0
        };
        grad.push(g * inv_b);
    }
    Ok((total * inv_b, Tensor::new(x.shape().to_vec(), grad)?))
}

pub fn gaussian_nll(x_hat: &Tensor, x: &Tensor, sigma: f64) -> Result<(f64, Tensor)> {
    check(x_hat, x)?;
    let inv_b = 1.0 / x.batch() as f64;
    let lik = Likelihood::Gaussian { sigma };
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(x.len());
    for (&q, &t) in x_hat.data().iter().zip(x.data()) {
        total += lik.pixel_nll(q, t);
        grad.push((q - t) / (sigma * sigma) * inv_b);
    }
    Ok((total * inv_b, Tensor::new(x.shape().to_vec(), grad)?))
}
