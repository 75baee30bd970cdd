//! Diagonal Gaussian and Laplace densities, analytic KL and the
//! reparameterization trick, each with hand-written gradients.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian stored as mean and log standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        check_dim(mean.len(), log_std.len())?;
        if mean.iter().chain(&log_std).any(|v| !v.is_finite()) {
            return Err(Error::invalid("gaussian parameters must be finite"));
        }
        Ok(Self { mean, log_std })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_std: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn gaussian_logpdf(g: &DiagonalGaussian, z: &[f64]) -> Result<f64> {
    check_dim(g.dim(), z.len())?;
    Ok(logpdf_unchecked(g, z))
}

pub(crate) fn logpdf_unchecked(g: &DiagonalGaussian, z: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((&m, &ls), &zi) in g.mean.iter().zip(&g.log_std).zip(z) {
        let u = (zi - m) * (-ls).exp();
        acc += -0.5 * u * u - ls;
    }
    acc - 0.5 * g.dim() as f64 * LN_2PI
}

/// Gradients of `log N(z; mean, exp(log_std))` with respect to
/// `(z, mean, log_std)`, each scaled by `weight` and accumulated.
pub(crate) fn logpdf_grad_acc(
    g: &DiagonalGaussian,
    z: &[f64],
    weight: f64,
    dz: &mut [f64],
    dmean: &mut [f64],
    dlog_std: &mut [f64],
) {
    for i in 0..g.dim() {
        let inv_var = (-2.0 * g.log_std[i]).exp();
        let diff = z[i] - g.mean[i];
        dz[i] -= weight * diff * inv_var;
        dmean[i] += weight * diff * inv_var;
        dlog_std[i] += weight * (diff * diff * inv_var - 1.0);
    }
}

/// `-Σ|x - loc| / scale - D·log(2·scale)`.
pub fn laplace_logpdf(loc: &[f64], scale: f64, x: &[f64]) -> Result<f64> {
    check_dim(loc.len(), x.len())?;
    if !(scale > 0.0) {
        return Err(Error::invalid(format!(
            "laplace scale must be positive, got {scale}"
        )));
    }
    let l1: f64 = loc.iter().zip(x).map(|(l, v)| (v - l).abs()).sum();
    Ok(-l1 / scale - loc.len() as f64 * (2.0 * scale).ln())
}

/// `mean + exp(log_std) · noise`.
pub fn reparameterize(g: &DiagonalGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    check_dim(g.dim(), noise.len())?;
    Ok(reparameterize_unchecked(g, noise))
}

pub(crate) fn reparameterize_unchecked(g: &DiagonalGaussian, noise: &[f64]) -> Vec<f64> {
    g.mean
        .iter()
        .zip(&g.log_std)
        .zip(noise)
        .map(|((m, ls), e)| m + ls.exp() * e)
        .collect()
}

/// Closed-form `KL(q || p)` between diagonal Gaussians.
pub fn gaussian_kl(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<f64> {
    check_dim(p.dim(), q.dim())?;
    Ok(kl_unchecked(q, p))
}

pub(crate) fn kl_unchecked(q: &DiagonalGaussian, p: &DiagonalGaussian) -> f64 {
    let mut acc = 0.0;
    for i in 0..q.dim() {
        let var_ratio = (2.0 * (q.log_std[i] - p.log_std[i])).exp();
        let diff = q.mean[i] - p.mean[i];
        let maha = diff * diff * (-2.0 * p.log_std[i]).exp();
        acc += p.log_std[i] - q.log_std[i] + 0.5 * (var_ratio + maha) - 0.5;
    }
    acc
}

/// Gradients of `KL(q || p)` scaled by `weight`, accumulated into the
/// `(q.mean, q.log_std, p.mean, p.log_std)` buffers.
pub(crate) struct KlGradBuffers<'a> {
    pub q_mean: &'a mut [f64],
    pub q_log_std: &'a mut [f64],
    pub p_mean: &'a mut [f64],
    pub p_log_std: &'a mut [f64],
}

pub(crate) fn kl_grad_acc(
    q: &DiagonalGaussian,
    p: &DiagonalGaussian,
    weight: f64,
    out: KlGradBuffers<'_>,
) {
    for i in 0..q.dim() {
        let var_ratio = (2.0 * (q.log_std[i] - p.log_std[i])).exp();
        let inv_pvar = (-2.0 * p.log_std[i]).exp();
        let diff = q.mean[i] - p.mean[i];
        out.q_mean[i] += weight * diff * inv_pvar;
        out.p_mean[i] -= weight * diff * inv_pvar;
        out.q_log_std[i] += weight * (var_ratio - 1.0);
        out.p_log_std[i] += weight * (1.0 - var_ratio - diff * diff * inv_pvar);
    }
}
