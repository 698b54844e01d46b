//! Loss terms: reconstruction MSE, closed-form Gaussian KL, the β-weighted
//! negative ELBO, the gradient-cosine constraint and the combined objective.
//!
//! Losses are accumulated in `f64` whatever the network precision.

use std::path::Path;

use ndarray::{ArrayView, ArrayView2, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Per-iteration (or per-epoch mean) loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub elbo_loss: f64,
    pub grad_loss: f64,
    pub total_j: f64,
}

impl LossBreakdown {
    pub fn new(recon: f64, kl: f64, beta: f64, grad_loss: f64, alpha: f64) -> Self {
        let elbo_loss = recon + beta * kl;
        Self {
            recon,
            kl,
            elbo_loss,
            grad_loss,
            total_j: total_training_loss(elbo_loss, grad_loss, alpha),
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.recon,
            self.kl,
            self.elbo_loss,
            self.grad_loss,
            self.total_j,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Mean of `(x̂ − x)²` over every element of the batch.
pub fn recon_loss<T: Real, D: Dimension>(
    x_hat: ArrayView<'_, T, D>,
    x: ArrayView<'_, T, D>,
) -> Result<f64> {
    if x_hat.shape() != x.shape() {
        return Err(Error::shape(
            "recon_loss",
            format!("{:?}", x.shape()),
            format!("{:?}", x_hat.shape()),
        ));
    }
    Ok(squared_error_sum(x_hat.iter().copied(), x.iter().copied()) / x.len().max(1) as f64)
}

pub(crate) fn squared_error_sum<T: Real>(
    a: impl Iterator<Item = T>,
    b: impl Iterator<Item = T>,
) -> f64 {
    a.zip(b)
        .map(|(p, q)| {
            let d = p.as_f64() - q.as_f64();
            d * d
        })
        .sum()
}

/// Per-sample `−½ Σ_j (1 + log σ_j² − μ_j² − σ_j²)`.
pub fn kl_per_sample<T: Real>(
    mu: ArrayView2<'_, T>,
    log_var: ArrayView2<'_, T>,
) -> Result<Vec<f64>> {
    if mu.dim() != log_var.dim() {
        return Err(Error::shape(
            "kl_divergence",
            format!("{:?}", mu.dim()),
            format!("{:?}", log_var.dim()),
        ));
    }
    mu.outer_iter()
        .zip(log_var.outer_iter())
        .map(|(m, lv)| kl_row(m.iter().copied(), lv.iter().copied()))
        .collect()
}

pub(crate) fn kl_row<T: Real>(
    mu: impl Iterator<Item = T>,
    log_var: impl Iterator<Item = T>,
) -> Result<f64> {
    let mut acc = 0.0;
    for (m, lv) in mu.zip(log_var) {
        let (m, lv) = (m.as_f64(), lv.as_f64());
        if !m.is_finite() || !lv.is_finite() {
            return Err(Error::Numeric("kl_divergence input".into()));
        }
        acc += -0.5 * (1.0 + lv - m * m - lv.exp());
    }
    Ok(acc)
}

/// Batch-mean KL divergence between `N(μ, σ²)` and `N(0, I)`; always ≥ 0.
pub fn kl_divergence<T: Real>(mu: ArrayView2<'_, T>, log_var: ArrayView2<'_, T>) -> Result<f64> {
    let per = kl_per_sample(mu, log_var)?;
    Ok(per.iter().sum::<f64>() / per.len().max(1) as f64)
}

/// Gradient of [`recon_loss`] with respect to `x_hat`: `2 (x̂ − x) / len`.
pub fn recon_loss_grad<T: Real>(x_hat: &[T], x: &[T]) -> Result<Vec<T>> {
    if x_hat.len() != x.len() {
        return Err(Error::shape("recon_loss_grad", x.len(), x_hat.len()));
    }
    let scale = T::lit(2.0 / x.len().max(1) as f64);
    Ok(x_hat
        .iter()
        .zip(x)
        .map(|(&a, &b)| (a - b) * scale)
        .collect())
}

/// Gradients of [`kl_divergence`] over a batch of `batch` samples with
/// respect to every `μ` and `log σ²` entry: `μ / n` and `(σ² − 1) / 2n`.
pub fn kl_divergence_grad<T: Real>(
    mu: &[T],
    log_var: &[T],
    batch: usize,
) -> Result<(Vec<T>, Vec<T>)> {
    if mu.len() != log_var.len() {
        return Err(Error::shape("kl_divergence_grad", mu.len(), log_var.len()));
    }
    let inv_n = T::lit(1.0 / batch.max(1) as f64);
    let half = T::lit(0.5);
    let d_mu = mu.iter().map(|&m| m * inv_n).collect();
    let d_lv = log_var
        .iter()
        .map(|&l| (l.exp() - T::one()) * half * inv_n)
        .collect();
    Ok((d_mu, d_lv))
}

/// Negative ELBO: `recon_loss + β · kl_divergence`.
pub fn elbo_loss<T: Real, D: Dimension>(
    x: ArrayView<'_, T, D>,
    x_hat: ArrayView<'_, T, D>,
    mu: ArrayView2<'_, T>,
    log_var: ArrayView2<'_, T>,
    beta: f64,
) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(Error::Config(format!("beta must be >= 0, got {beta}")));
    }
    Ok(recon_loss(x_hat, x)? + beta * kl_divergence(mu, log_var)?)
}

/// `J = elbo_loss + α · grad_loss`.
pub fn total_training_loss(elbo_loss: f64, grad_loss: f64, alpha: f64) -> f64 {
    elbo_loss + alpha * grad_loss
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero-norm on either side counts as orthogonal.
///
/// The denominator is `sqrt(|a|²·|b|²)`, so `cos(a, a) = 1` and `cos(a, −a) = −1`
/// hold exactly.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (aa, bb) = (dot(a, a), dot(b, b));
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    let prod = aa * bb;
    let denom = if prod.is_normal() {
        prod.sqrt()
    } else {
        aa.sqrt() * bb.sqrt()
    };
    (dot(a, b) / denom).clamp(-1.0, 1.0)
}

/// Running mean of per-iteration decoder gradients, one vector per decoder layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientState {
    pub layer_names: Vec<String>,
    pub averages: Vec<Vec<f64>>,
    /// Number of gradients folded into the averages.
    pub k: u64,
}

impl GradientState {
    pub fn new(layers: Vec<(String, usize)>) -> Self {
        let (layer_names, sizes): (Vec<_>, Vec<_>) = layers.into_iter().unzip();
        Self {
            layer_names,
            averages: sizes.into_iter().map(|n| vec![0.0; n]).collect(),
            k: 0,
        }
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.averages.iter().map(Vec::len).collect()
    }

    fn check(&self, current: &[Vec<f64>]) -> Result<()> {
        let sizes: Vec<usize> = current.iter().map(Vec::len).collect();
        if sizes != self.layer_sizes() {
            return Err(Error::shape(
                "gradient state",
                format!("{:?}", self.layer_sizes()),
                format!("{sizes:?}"),
            ));
        }
        Ok(())
    }

    /// `avg ← (k·avg + g) / (k + 1)`, `k ← k + 1`.
    pub fn update(&mut self, current: &[Vec<f64>]) -> Result<()> {
        self.check(current)?;
        let k = self.k as f64;
        for (avg, g) in self.averages.iter_mut().zip(current) {
            for (a, &v) in avg.iter_mut().zip(g) {
                *a = (k * *a + v) / (k + 1.0);
            }
        }
        self.k += 1;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(GRAD_STATE_MAGIC);
        buf.extend_from_slice(&self.k.to_le_bytes());
        buf.extend_from_slice(&(self.averages.len() as u64).to_le_bytes());
        for (name, avg) in self.layer_names.iter().zip(&self.averages) {
            buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(avg.len() as u64).to_le_bytes());
            for v in avg {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = crate::checkpoint::ByteReader::new(&bytes);
        if r.take(GRAD_STATE_MAGIC.len())? != GRAD_STATE_MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: not a gradient state file",
                path.display()
            )));
        }
        let k = r.u64()?;
        let layers = r.u64()? as usize;
        let mut layer_names = Vec::with_capacity(layers);
        let mut averages = Vec::with_capacity(layers);
        for _ in 0..layers {
            layer_names.push(r.string()?);
            let n = r.u64()? as usize;
            averages.push((0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
        }
        Ok(Self {
            layer_names,
            averages,
            k,
        })
    }
}

const GRAD_STATE_MAGIC: &[u8; 8] = b"BVADGRD1";

/// Functional form of [`GradientState::update`].
pub fn update_gradient_average(
    state: &GradientState,
    current: &[Vec<f64>],
) -> Result<GradientState> {
    let mut next = state.clone();
    next.update(current)?;
    Ok(next)
}

/// `L_grad = −mean_i cos(avg_i, current_i)` over decoder layers, in `[-1, 1]`.
///
/// With no history (`k = 0`) the loss is defined as 0.
pub fn gradient_loss(current: &[Vec<f64>], state: &GradientState) -> Result<f64> {
    state.check(current)?;
    if state.k == 0 {
        log::debug!("gradient loss requested with empty gradient history; using 0");
        return Ok(0.0);
    }
    let layers = current.len().max(1) as f64;
    let sum: f64 = state
        .averages
        .iter()
        .zip(current)
        .map(|(a, g)| cosine_similarity(a, g))
        .sum();
    Ok((-sum / layers).clamp(-1.0, 1.0))
}

/// Derivative of [`gradient_loss`] with respect to `current`.
///
/// `∂cos(a, g)/∂g = a / (|a||g|) − cos · g / |g|²`.
pub fn gradient_loss_grad(current: &[Vec<f64>], state: &GradientState) -> Result<Vec<Vec<f64>>> {
    state.check(current)?;
    let layers = current.len().max(1) as f64;
    Ok(state
        .averages
        .iter()
        .zip(current)
        .map(|(a, g)| {
            let (na, ng) = (norm(a), norm(g));
            if state.k == 0 || na == 0.0 || ng == 0.0 {
                return vec![0.0; g.len()];
            }
            let cos = dot(a, g) / (na * ng);
            a.iter()
                .zip(g)
                .map(|(&ai, &gi)| -(ai / (na * ng) - cos * gi / (ng * ng)) / layers)
                .collect()
        })
        .collect())
}
