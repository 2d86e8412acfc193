//! Diagonal Gaussians: reparameterized sampling, log density and the
//! closed-form KL divergence, in both plain-value and graph form.
//!
//! Log-variances are clamped to `[LOG_VAR_MIN, LOG_VAR_MAX]` before use so
//! that `sigma = exp(log_var / 2)` is always positive and finite.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussian {
    mu: Vec<f64>,
    log_var: Vec<f64>,
}

/// A reparameterized draw together with the noise that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub eps: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.is_empty() || mu.len() != log_var.len() {
            return Err(Error::shape("gaussian", &[mu.len()], &[log_var.len()]));
        }
        let log_var = log_var
            .into_iter()
            .map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
            .collect();
        Ok(DiagonalGaussian { mu, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        DiagonalGaussian {
            mu: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }

    /// `z = mu + sigma * eps`.
    pub fn sample(&self, eps: &[f64]) -> Result<LatentSample> {
        if eps.len() != self.dim() {
            return Err(Error::shape("reparam_sample", &[self.dim()], &[eps.len()]));
        }
        let z = self
            .mu
            .iter()
            .zip(&self.log_var)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        Ok(LatentSample {
            z,
            eps: eps.to_vec(),
        })
    }

    pub fn log_prob(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::shape("log_prob", &[self.dim()], &[z.len()]));
        }
        let s: f64 = self
            .mu
            .iter()
            .zip(&self.log_var)
            .zip(z)
            .map(|((m, lv), zi)| LN_2PI + lv + (zi - m).powi(2) * (-lv).exp())
            .sum();
        Ok(-0.5 * s)
    }

    /// `KL[self || p]` in closed form.
    pub fn kl(&self, p: &DiagonalGaussian) -> Result<f64> {
        let mut g = Graph::new();
        let q = GaussianVar::constant(&mut g, self)?;
        let p = GaussianVar::constant(&mut g, p)?;
        let kl = kl_divergence(&mut g, q, p)?;
        Ok(g.value(kl).item())
    }
}

/// A (possibly batched) diagonal Gaussian living on a graph. `mu` and
/// `log_var` share a shape: `[L]` or `[B, L]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVar {
    pub mu: Var,
    pub log_var: Var,
}

impl GaussianVar {
    /// Splits a network output of width `2 * latent` into `(mu, log_var)`.
    pub fn from_raw(g: &mut Graph, raw: Var, latent: usize) -> Result<Self> {
        if g.value(raw).cols() != 2 * latent {
            return Err(Error::shape("gaussian", g.shape(raw), &[2 * latent]));
        }
        let mu = g.slice(raw, 0, latent)?;
        let lv = g.slice(raw, latent, 2 * latent)?;
        Self::from_parts(g, mu, lv)
    }

    pub fn from_parts(g: &mut Graph, mu: Var, log_var: Var) -> Result<Self> {
        if g.shape(mu) != g.shape(log_var) {
            return Err(Error::shape("gaussian", g.shape(mu), g.shape(log_var)));
        }
        let log_var = g.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX);
        Ok(GaussianVar { mu, log_var })
    }

    pub fn constant(g: &mut Graph, d: &DiagonalGaussian) -> Result<Self> {
        let mu = g.constant(Tensor::vector(d.mu.clone())?);
        let lv = g.constant(Tensor::vector(d.log_var.clone())?);
        Ok(GaussianVar { mu, log_var: lv })
    }

    /// Row `i` of a batched Gaussian (or the whole thing when unbatched).
    pub fn row(&self, g: &Graph, i: usize) -> DiagonalGaussian {
        let (m, lv) = (g.value(self.mu), g.value(self.log_var));
        if m.rank() == 1 {
            return DiagonalGaussian {
                mu: m.data().to_vec(),
                log_var: lv.data().to_vec(),
            };
        }
        DiagonalGaussian {
            mu: m.row(i).to_vec(),
            log_var: lv.row(i).to_vec(),
        }
    }
}

/// `z = mu + exp(log_var / 2) * eps`, differentiable in `mu` and `log_var`.
pub fn reparam_sample(g: &mut Graph, d: GaussianVar, eps: &Tensor) -> Result<Var> {
    if g.shape(d.mu) != eps.shape() {
        return Err(Error::shape("reparam_sample", g.shape(d.mu), eps.shape()));
    }
    let half = g.scale(d.log_var, 0.5);
    let sigma = g.exp(half);
    let e = g.constant(eps.clone());
    let noise = g.mul(sigma, e)?;
    g.add(d.mu, noise)
}

/// `KL[q || p]` summed over every element (so over the batch as well when
/// the Gaussians are batched). Per dimension:
/// `(lv_p - lv_q)/2 + (exp(lv_q - lv_p) + (mu_q - mu_p)^2 exp(-lv_p))/2 - 1/2`.
pub fn kl_divergence(g: &mut Graph, q: GaussianVar, p: GaussianVar) -> Result<Var> {
    if g.shape(q.mu) != g.shape(p.mu) {
        return Err(Error::shape("kl_divergence", g.shape(q.mu), g.shape(p.mu)));
    }
    let log_ratio = g.sub(p.log_var, q.log_var)?;
    let neg = g.scale(log_ratio, -1.0);
    let var_ratio = g.exp(neg);
    let diff = g.sub(q.mu, p.mu)?;
    let sq = g.mul(diff, diff)?;
    let neg_lvp = g.scale(p.log_var, -1.0);
    let inv_var_p = g.exp(neg_lvp);
    let mahal = g.mul(sq, inv_var_p)?;
    let s = g.add(log_ratio, var_ratio)?;
    let s = g.add(s, mahal)?;
    let s = g.add_scalar(s, -1.0);
    let total = g.sum(s);
    Ok(g.scale(total, 0.5))
}

/// Log density of `z` under `d`, summed over every element.
pub fn log_prob(g: &mut Graph, d: GaussianVar, z: Var) -> Result<Var> {
    let diff = g.sub(z, d.mu)?;
    let sq = g.mul(diff, diff)?;
    let neg_lv = g.scale(d.log_var, -1.0);
    let inv_var = g.exp(neg_lv);
    let mahal = g.mul(sq, inv_var)?;
    let s = g.add(mahal, d.log_var)?;
    let s = g.add_scalar(s, LN_2PI);
    let total = g.sum(s);
    Ok(g.scale(total, -0.5))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    /// Standard error of `mean`; infinite when only one sample was drawn.
    pub std_err: f64,
}

/// Monte Carlo estimate of `KL[q || p]` as the mean of `log q(z) - log p(z)`
/// over `z ~ q`.
pub fn mc_kl_estimate(
    q: &DiagonalGaussian,
    p: &DiagonalGaussian,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if q.dim() != p.dim() {
        return Err(Error::shape("mc_kl_estimate", &[q.dim()], &[p.dim()]));
    }
    if n_samples == 0 {
        return Err(Error::invalid("mc_kl_estimate needs at least one sample"));
    }
    let mut r = rng::rng(&[seed]);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        let eps = rng::standard_normal(&mut r, q.dim());
        let z = q.sample(&eps)?.z;
        let x = q.log_prob(&z)? - p.log_prob(&z)?;
        sum += x;
        sum_sq += x * x;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let std_err = if n_samples > 1 {
        let var = (sum_sq - n * mean * mean).max(0.0) / (n - 1.0);
        (var / n).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(McEstimate { mean, std_err })
}
