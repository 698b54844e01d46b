//! Exact t-SNE (O(n²) per iteration), adequate for a few hundred points.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub early_exaggeration: f64,
    /// Iterations run with exaggerated affinities; momentum switches here too.
    pub exaggeration_iters: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub min_gain: f64,
    /// Standard deviation of the Gaussian initialization.
    pub init_std: f64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 5.0,
            iterations: 1000,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            min_gain: 0.01,
            init_std: 1e-4,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.perplexity > 0.0 && self.perplexity.is_finite()) {
            return Err(Error::Config(format!(
                "perplexity must be > 0, got {}",
                self.perplexity
            )));
        }
        if (n as f64) < 3.0 * self.perplexity {
            return Err(Error::Config(format!(
                "t-SNE needs at least 3 × perplexity = {} points, got {n}",
                3.0 * self.perplexity
            )));
        }
        if self.iterations == 0 || !(self.learning_rate > 0.0) || !(self.init_std > 0.0) {
            return Err(Error::Config(
                "t-SNE iterations, learning rate and init_std must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsneRun {
    /// `(n, 2)` embedding.
    pub points: Array2<f64>,
    /// `KL(P ‖ Q)` of the final embedding without exaggeration.
    pub kl: f64,
}

fn squared_distances(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[[i, j]] = s;
            d[[j, i]] = s;
        }
    }
    d
}

/// Conditional affinities `p_{j|i}` with per-row bandwidths found by bisection
/// so that each row's entropy equals `ln(perplexity)`.
fn conditional_affinities(d: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = d.nrows();
    let target = perplexity.ln();
    let mut p = Array2::zeros((n, n));
    let mut row = vec![0.0; n];
    for i in 0..n {
        let (mut beta, mut lo, mut hi) = (1.0, f64::NEG_INFINITY, f64::INFINITY);
        // Shift by the nearest-neighbor distance for numerical range.
        let dmin = (0..n)
            .filter(|&j| j != i)
            .map(|j| d[[i, j]])
            .fold(f64::INFINITY, f64::min);
        for _ in 0..200 {
            let mut sum = 0.0;
            let mut wsum = 0.0;
            for j in 0..n {
                row[j] = if j == i {
                    0.0
                } else {
                    (-(d[[i, j]] - dmin) * beta).exp()
                };
                sum += row[j];
                wsum += row[j] * (d[[i, j]] - dmin);
            }
            let entropy = sum.ln() + beta * wsum / sum;
            let diff = entropy - target;
            if diff.abs() < 1e-10 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() {
                    (beta + hi) / 2.0
                } else {
                    beta * 2.0
                };
            } else {
                hi = beta;
                beta = if lo.is_finite() {
                    (beta + lo) / 2.0
                } else {
                    beta / 2.0
                };
            }
        }
        let sum: f64 = row.iter().sum();
        for j in 0..n {
            p[[i, j]] = row[j] / sum;
        }
    }
    p
}

/// Symmetrized joint affinities `P = (P_cond + P_condᵀ) / 2n`.
pub fn joint_affinities(x: ArrayView2<'_, f64>, perplexity: f64) -> Array2<f64> {
    let n = x.nrows();
    let pc = conditional_affinities(&squared_distances(x), perplexity);
    let mut p = &pc + &pc.t();
    p.mapv_inplace(|v| (v / (2.0 * n as f64)).max(1e-12));
    for i in 0..n {
        p[[i, i]] = 0.0;
    }
    p
}

/// Student-t kernel numerators and their sum.
fn low_dim_kernel(y: &Array2<f64>) -> (Array2<f64>, f64) {
    let n = y.nrows();
    let mut num = Array2::zeros((n, n));
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[[i, 0]] - y[[j, 0]];
            let dy = y[[i, 1]] - y[[j, 1]];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[[i, j]] = v;
            num[[j, i]] = v;
            sum += 2.0 * v;
        }
    }
    (num, sum)
}

pub fn kl_divergence(p: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let (num, sum) = low_dim_kernel(y);
    let n = p.nrows();
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let q = (num[[i, j]] / sum).max(1e-300);
                kl += p[[i, j]] * (p[[i, j]] / q).ln();
            }
        }
    }
    kl.max(0.0)
}

/// One seeded t-SNE optimization of the rows of `x`.
pub fn tsne(x: ArrayView2<'_, f64>, cfg: &TsneConfig, seed: u64) -> Result<TsneRun> {
    let n = x.nrows();
    cfg.validate(n)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "t-SNE input contains non-finite values".into(),
        ));
    }
    let p = joint_affinities(x, cfg.perplexity);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = Array2::from_shape_fn((n, 2), |_| {
        cfg.init_std * rng.sample::<f64, _>(StandardNormal)
    });
    let mut update = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let mut grad = Array2::<f64>::zeros((n, 2));

    for it in 0..cfg.iterations {
        let early = it < cfg.exaggeration_iters;
        let exag = if early { cfg.early_exaggeration } else { 1.0 };
        let momentum = if early {
            cfg.initial_momentum
        } else {
            cfg.final_momentum
        };
        let (num, sum) = low_dim_kernel(&y);
        grad.fill(0.0);
        for i in 0..n {
            let (mut g0, mut g1) = (0.0, 0.0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = (exag * p[[i, j]] - num[[i, j]] / sum) * num[[i, j]];
                g0 += w * (y[[i, 0]] - y[[j, 0]]);
                g1 += w * (y[[i, 1]] - y[[j, 1]]);
            }
            grad[[i, 0]] = 4.0 * g0;
            grad[[i, 1]] = 4.0 * g1;
        }
        for ((g, u), gain) in grad.iter().zip(update.iter_mut()).zip(gains.iter_mut()) {
            *gain = if (*g > 0.0) != (*u > 0.0) {
                *gain + 0.2
            } else {
                *gain * 0.8
            };
            *gain = gain.max(cfg.min_gain);
            *u = momentum * *u - cfg.learning_rate * *gain * g;
        }
        y += &update;
        let mean = y.mean_axis(ndarray::Axis(0)).expect("non-empty");
        y -= &mean;
    }
    let kl = kl_divergence(&p, &y);
    if !kl.is_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("t-SNE optimization diverged".into()));
    }
    Ok(TsneRun { points: y, kl })
}
