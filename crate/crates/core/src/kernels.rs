//! Bandwidth arithmetic and the Gaussian kernel.
//!
//! Bandwidths are carried as the inverse-scale parameter `gamma = 1 / (2 sigma^2)`,
//! so the unnormalized kernel is `exp(-gamma * |x - y|^2)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// An isotropic Gaussian bandwidth for `dim`-dimensional data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bandwidth {
    gamma: f64,
    dim: usize,
}

impl Bandwidth {
    pub fn new(gamma: f64, dim: usize) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Domain(format!(
                "gamma must be positive and finite, got {gamma}"
            )));
        }
        if dim == 0 {
            return Err(Error::Domain("dimension must be at least 1".into()));
        }
        Ok(Self { gamma, dim })
    }

    pub fn from_sigma(sigma: f64, dim: usize) -> Result<Self> {
        Self::new(gamma_from_sigma(sigma)?, dim)
    }

    #[inline]
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Standard deviation of the kernel along each axis.
    pub fn sigma(&self) -> f64 {
        (0.5 / self.gamma).sqrt()
    }

    /// `(pi / gamma)^(d/2)`: the integral of `exp(-gamma |x - u|^2)` over `u`.
    pub fn kde_normalizer(&self) -> f64 {
        (PI / self.gamma).powf(self.dim as f64 / 2.0)
    }

    /// `(pi / (2 gamma))^(d/2)`: the Born-rule normalizer of the density-matrix estimator.
    pub fn dm_normalizer(&self) -> f64 {
        (PI / (2.0 * self.gamma)).powf(self.dim as f64 / 2.0)
    }

    /// Unnormalized kernel value `exp(-gamma |x - y|^2)`; no dimension check.
    #[inline]
    pub fn unnormalized(&self, x: &[f64], y: &[f64]) -> f64 {
        (-self.gamma * sq_dist(x, y)).exp()
    }
}

pub fn gamma_from_sigma(sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!(
            "sigma must be positive and finite, got {sigma}"
        )));
    }
    Ok(1.0 / (2.0 * sigma * sigma))
}

/// `(2 pi)^(-d/2) exp(-gamma |x - y|^2)`.
pub fn gaussian_kernel(x: &[f64], y: &[f64], bw: &Bandwidth) -> Result<f64> {
    check_dim(bw.dim, x.len())?;
    check_dim(bw.dim, y.len())?;
    let prefactor = (2.0 * PI).powf(-(bw.dim as f64) / 2.0);
    Ok(prefactor * bw.unnormalized(x, y))
}

#[inline]
pub fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}
