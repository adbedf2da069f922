//! Random Fourier features for the Gaussian kernel.
//!
//! The feature map is `phi(x)_j = sqrt(2/D) cos(w_j . x + b_j)` with
//! `w_j ~ N(0, 2 gamma I_d)` and `b_j ~ U[0, 2 pi)`, so that
//! `E[phi(x) . phi(y)] = exp(-gamma |x - y|^2)`.
//!
//! Sampling uses `ChaCha8Rng` (a counter-based stream cipher generator) seeded
//! from a `u64`; normal variates come from the ziggurat sampler of `rand_distr`.

use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::points::PointSet;

/// A frozen random Fourier feature map from `R^dim` to `R^features`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RffMap {
    dim: usize,
    features: usize,
    gamma: f64,
    seed: u64,
    /// `features × dim` frequencies, row-major.
    weights: Vec<f64>,
    phases: Vec<f64>,
}

impl RffMap {
    /// Samples a map. Identical arguments give bit-identical maps.
    pub fn sample(dim: usize, features: usize, gamma: f64, seed: u64) -> Result<Self> {
        if dim == 0 || features == 0 {
            return Err(Error::Domain(format!(
                "RFF map needs dim >= 1 and features >= 1, got dim={dim} features={features}"
            )));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Domain(format!(
                "gamma must be positive, got {gamma}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (2.0 * gamma).sqrt();
        let weights = (0..features * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect();
        let phase = Uniform::new(0.0, TAU).expect("valid phase range");
        let phases = (0..features).map(|_| phase.sample(&mut rng)).collect();
        Ok(Self {
            dim,
            features,
            gamma,
            seed,
            weights,
            phases,
        })
    }

    /// Builds a map from explicit frequencies (`features × dim`, row-major) and phases.
    pub fn from_parts(
        dim: usize,
        weights: Vec<f64>,
        phases: Vec<f64>,
        gamma: f64,
        seed: u64,
    ) -> Result<Self> {
        let features = phases.len();
        if dim == 0 || features == 0 || weights.len() != dim * features {
            return Err(Error::Data(format!(
                "inconsistent RFF parts: dim={dim}, {} weights, {features} phases",
                weights.len()
            )));
        }
        Ok(Self {
            dim,
            features,
            gamma,
            seed,
            weights,
            phases,
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of features `D`.
    #[inline]
    pub fn features(&self) -> usize {
        self.features
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn frequency(&self, j: usize) -> &[f64] {
        &self.weights[j * self.dim..(j + 1) * self.dim]
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        let mut out = vec![0.0; self.features];
        self.transform_into(x, &mut out);
        Ok(out)
    }

    /// Writes `phi(x)` into `out`. Lengths are the caller's responsibility.
    pub fn transform_into(&self, x: &[f64], out: &mut [f64]) {
        let amp = (2.0 / self.features as f64).sqrt();
        for ((o, w), b) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.dim))
            .zip(&self.phases)
        {
            let proj: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            *o = amp * (proj + b).cos();
        }
    }

    /// Feature matrix of a point set, `len × features` row-major.
    pub fn transform_batch(&self, points: &PointSet) -> Result<Vec<f64>> {
        check_dim(self.dim, points.dim())?;
        let mut out = vec![0.0; points.len() * self.features];
        for (x, o) in points.rows().zip(out.chunks_exact_mut(self.features)) {
            self.transform_into(x, o);
        }
        Ok(out)
    }
}
