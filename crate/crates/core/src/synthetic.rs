//! Synthetic benchmark densities: a curved "arc", four energy potentials on
//! `[-4, 4]^2`, and two Gaussian mixtures. Every data set comes with its
//! exact density so estimators can be scored against ground truth.
//!
//! Potentials are energies `U(x)`; their density is `exp(-U(x)) / Z` on the
//! support box and zero outside.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::points::PointSet;
use crate::seed::derive_seed;

pub const POTENTIAL_HALF_WIDTH: f64 = 4.0;
/// Grid resolution (per axis) used to bound potentials for rejection sampling.
pub const ENVELOPE_GRID: usize = 400;
pub const ENVELOPE_MARGIN: f64 = 1.1;
const SAMPLE_CHUNK: usize = 4096;
const NORMALIZER_GRID: usize = 1600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Arc,
    Potential1,
    Potential2,
    Potential3,
    Potential4,
    Mixture2d,
    Mixture10d,
}

impl DatasetName {
    pub const ALL: [DatasetName; 7] = [
        DatasetName::Arc,
        DatasetName::Potential1,
        DatasetName::Potential2,
        DatasetName::Potential3,
        DatasetName::Potential4,
        DatasetName::Mixture2d,
        DatasetName::Mixture10d,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetName::Arc => "arc",
            DatasetName::Potential1 => "potential1",
            DatasetName::Potential2 => "potential2",
            DatasetName::Potential3 => "potential3",
            DatasetName::Potential4 => "potential4",
            DatasetName::Mixture2d => "mixture2d",
            DatasetName::Mixture10d => "mixture10d",
        }
    }

    pub fn is_potential(&self) -> bool {
        matches!(
            self,
            DatasetName::Potential1
                | DatasetName::Potential2
                | DatasetName::Potential3
                | DatasetName::Potential4
        )
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetName::ALL
            .into_iter()
            .find(|d| d.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Domain(format!("unknown dataset {s:?}")))
    }
}

/// A Gaussian mixture with diagonal covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Per-coordinate variances of each component.
    pub variances: Vec<Vec<f64>>,
}

impl DiagonalMixture {
    fn density(&self, x: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, mu), var)| {
                let mut quad = 0.0;
                let mut det = 1.0;
                for ((xi, m), v) in x.iter().zip(mu).zip(var) {
                    quad += (xi - m) * (xi - m) / v;
                    det *= TAU * v;
                }
                w * (-0.5 * quad).exp() / det.sqrt()
            })
            .sum()
    }

    fn sample<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        for ((o, m), v) in out.iter_mut().zip(&self.means[k]).zip(&self.variances[k]) {
            let z: f64 = StandardNormal.sample(rng);
            *o = m + v.sqrt() * z;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityParams {
    /// `N(x2 | 0, 4) N(x1 | x2^2 / 4, 1)`.
    Arc,
    Potential,
    Mixture(DiagonalMixture),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub name: DatasetName,
    pub dim: usize,
    /// Support box for potentials; `None` means all of `R^d`.
    pub support: Option<(Vec<f64>, Vec<f64>)>,
    /// Normalizing constant of the unnormalized density (1 for closed-form densities).
    pub normalizer: f64,
    pub params: DensityParams,
}

impl SyntheticSpec {
    /// Builds the spec for `name`. `seed` only matters for `mixture10d`,
    /// whose component parameters are drawn at random.
    pub fn new(name: DatasetName, seed: u64) -> Self {
        match name {
            DatasetName::Arc => Self {
                name,
                dim: 2,
                support: None,
                normalizer: 1.0,
                params: DensityParams::Arc,
            },
            DatasetName::Mixture2d => Self {
                name,
                dim: 2,
                support: None,
                normalizer: 1.0,
                params: DensityParams::Mixture(DiagonalMixture {
                    weights: vec![0.5, 0.5],
                    means: vec![vec![1.0, -1.0], vec![-2.0, 2.0]],
                    variances: vec![vec![1.0, 2.0], vec![2.0, 1.0]],
                }),
            },
            DatasetName::Mixture10d => make_mixture10d_spec(seed),
            _ => {
                let h = POTENTIAL_HALF_WIDTH;
                let mut spec = Self {
                    name,
                    dim: 2,
                    support: Some((vec![-h, -h], vec![h, h])),
                    normalizer: 1.0,
                    params: DensityParams::Potential,
                };
                spec.normalizer = spec.grid_normalizer(NORMALIZER_GRID);
                spec
            }
        }
    }

    pub fn is_potential(&self) -> bool {
        self.name.is_potential()
    }

    /// Density before dividing by [`Self::normalizer`]; zero outside the support.
    pub fn unnormalized_density(&self, x: &[f64]) -> f64 {
        if let Some((lo, hi)) = &self.support {
            if x.iter()
                .zip(lo.iter().zip(hi))
                .any(|(v, (l, h))| v < l || v > h)
            {
                return 0.0;
            }
        }
        match &self.params {
            DensityParams::Arc => {
                let (x1, x2) = (x[0], x[1]);
                let n2 = (-x2 * x2 / 8.0).exp() / (TAU * 4.0).sqrt();
                let r = x1 - 0.25 * x2 * x2;
                let n1 = (-0.5 * r * r).exp() / TAU.sqrt();
                n1 * n2
            }
            DensityParams::Mixture(m) => m.density(x),
            DensityParams::Potential => potential_weight(self.name, x[0], x[1]),
        }
    }

    pub fn true_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        Ok(self.unnormalized_density(x) / self.normalizer)
    }

    pub fn true_density_batch(&self, points: &PointSet) -> Result<Vec<f64>> {
        check_dim(self.dim, points.dim())?;
        Ok(points
            .as_slice()
            .par_chunks_exact(self.dim)
            .map(|x| self.unnormalized_density(x) / self.normalizer)
            .collect())
    }

    /// A box holding all but a negligible fraction of the probability mass.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        if let Some(s) = &self.support {
            return s.clone();
        }
        match &self.params {
            DensityParams::Arc => (vec![-6.0, -10.0], vec![31.0, 10.0]),
            DensityParams::Mixture(m) => {
                let mut lo = vec![f64::INFINITY; self.dim];
                let mut hi = vec![f64::NEG_INFINITY; self.dim];
                for (mu, var) in m.means.iter().zip(&m.variances) {
                    for k in 0..self.dim {
                        let s = 8.0 * var[k].sqrt();
                        lo[k] = lo[k].min(mu[k] - s);
                        hi[k] = hi[k].max(mu[k] + s);
                    }
                }
                (lo, hi)
            }
            DensityParams::Potential => unreachable!("potentials always carry a support box"),
        }
    }

    /// Midpoint-rule integral of the unnormalized density over the support
    /// (2-D potentials only).
    fn grid_normalizer(&self, steps: usize) -> f64 {
        let (lo, hi) = self.bounding_box();
        let hx = (hi[0] - lo[0]) / steps as f64;
        let hy = (hi[1] - lo[1]) / steps as f64;
        (0..steps)
            .into_par_iter()
            .map(|i| {
                let x = lo[0] + (i as f64 + 0.5) * hx;
                (0..steps)
                    .map(|j| potential_weight(self.name, x, lo[1] + (j as f64 + 0.5) * hy))
                    .sum::<f64>()
            })
            .sum::<f64>()
            * hx
            * hy
    }

    /// Draws `n` i.i.d. points. Work is split into fixed-size chunks, each with
    /// its own RNG seeded from `(seed, chunk index)`, so output depends only on
    /// `(n, seed)`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<PointSet> {
        if n == 0 {
            return Err(Error::Domain("sample size must be at least 1".into()));
        }
        let envelope = if self.is_potential() {
            Some(self.envelope())
        } else {
            None
        };
        let dim = self.dim;
        let chunks: Vec<Result<Vec<f64>>> = (0..n.div_ceil(SAMPLE_CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(seed, &["sample", &c.to_string()]));
                let rows = SAMPLE_CHUNK.min(n - c * SAMPLE_CHUNK);
                let mut out = vec![0.0; rows * dim];
                for x in out.chunks_exact_mut(dim) {
                    match (&self.params, envelope) {
                        (DensityParams::Arc, _) => {
                            let z2: f64 = StandardNormal.sample(&mut rng);
                            let z1: f64 = StandardNormal.sample(&mut rng);
                            x[1] = 2.0 * z2;
                            x[0] = 0.25 * x[1] * x[1] + z1;
                        }
                        (DensityParams::Mixture(m), _) => m.sample(&mut rng, x),
                        (DensityParams::Potential, Some(bound)) => {
                            self.rejection_draw(&mut rng, bound, x)?
                        }
                        (DensityParams::Potential, None) => unreachable!(),
                    }
                }
                Ok(out)
            })
            .collect();
        let mut data = Vec::with_capacity(n * dim);
        for c in chunks {
            data.extend(c?);
        }
        PointSet::new(dim, data)
    }

    /// `ENVELOPE_MARGIN` times the largest unnormalized density on an
    /// `ENVELOPE_GRID`² grid over the support.
    pub fn envelope(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        let g = ENVELOPE_GRID;
        let mut best: f64 = 0.0;
        for i in 0..g {
            let x = lo[0] + (hi[0] - lo[0]) * i as f64 / (g - 1) as f64;
            for j in 0..g {
                let y = lo[1] + (hi[1] - lo[1]) * j as f64 / (g - 1) as f64;
                best = best.max(self.unnormalized_density(&[x, y]));
            }
        }
        ENVELOPE_MARGIN * best
    }

    fn rejection_draw<R: Rng>(&self, rng: &mut R, bound: f64, out: &mut [f64]) -> Result<()> {
        let (lo, hi) = self
            .support
            .as_ref()
            .expect("potentials have a support box");
        loop {
            for ((o, l), h) in out.iter_mut().zip(lo).zip(hi) {
                *o = rng.random_range(*l..*h);
            }
            let f = self.unnormalized_density(out);
            if f > bound {
                return Err(Error::Internal(format!(
                    "{}: density {f} exceeds rejection envelope {bound}",
                    self.name
                )));
            }
            if rng.random::<f64>() * bound < f {
                return Ok(());
            }
        }
    }

    /// Monte-Carlo estimate of the potential's normalizing constant and its
    /// standard error, from `n_mc` uniform draws over the support box.
    pub fn estimate_normalizer(&self, n_mc: usize, seed: u64) -> Result<(f64, f64)> {
        let (lo, hi) = self.support.as_ref().ok_or_else(|| {
            Error::Domain(format!(
                "{} has no bounded support to integrate over",
                self.name
            ))
        })?;
        if n_mc < 10_000 {
            return Err(Error::Domain(format!(
                "need at least 10^4 Monte-Carlo draws, got {n_mc}"
            )));
        }
        let volume: f64 = lo.iter().zip(hi).map(|(l, h)| h - l).product();
        let chunk = 1 << 16;
        let (sum, sum_sq) = (0..n_mc.div_ceil(chunk))
            .into_par_iter()
            .map(|c| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(seed, &["normalizer", &c.to_string()]));
                let mut x = vec![0.0; self.dim];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for _ in 0..chunk.min(n_mc - c * chunk) {
                    for ((o, l), h) in x.iter_mut().zip(lo).zip(hi) {
                        *o = rng.random_range(*l..*h);
                    }
                    let f = self.unnormalized_density(&x);
                    s += f;
                    s2 += f * f;
                }
                (s, s2)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold((0.0, 0.0), |(a, b), (c, d)| (a + c, b + d));
        let n = n_mc as f64;
        let mean = sum / n;
        let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
        Ok((volume * mean, volume * (var / n).sqrt()))
    }
}

/// Four diagonal Gaussians with equal weight; each mean coordinate is uniform
/// on `[-0.5, 0.5]` and each per-coordinate standard deviation uniform on
/// `[0.01, 0.5]`.
pub fn make_mixture10d_spec(seed: u64) -> SyntheticSpec {
    let dim = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["mixture10d"]));
    let mut means = Vec::with_capacity(4);
    let mut variances = Vec::with_capacity(4);
    for _ in 0..4 {
        means.push((0..dim).map(|_| rng.random_range(-0.5..=0.5)).collect());
        variances.push(
            (0..dim)
                .map(|_| {
                    let s: f64 = rng.random_range(0.01..=0.5);
                    s * s
                })
                .collect(),
        );
    }
    SyntheticSpec {
        name: DatasetName::Mixture10d,
        dim,
        support: None,
        normalizer: 1.0,
        params: DensityParams::Mixture(DiagonalMixture {
            weights: vec![0.25; 4],
            means,
            variances,
        }),
    }
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// `exp(-U(x))` for the named potential, without the support check.
fn potential_weight(name: DatasetName, x1: f64, x2: f64) -> f64 {
    let w1 = (TAU * x1 / 4.0).sin();
    let gauss = |t: f64| (-0.5 * t * t).exp();
    match name {
        DatasetName::Potential1 => {
            let r = x1.hypot(x2);
            gauss((r - 2.0) / 0.4) * (gauss((x1 - 2.0) / 0.6) + gauss((x1 + 2.0) / 0.6))
        }
        DatasetName::Potential2 => gauss((x2 - w1) / 0.4),
        DatasetName::Potential3 => {
            let w2 = 3.0 * gauss((x1 - 1.0) / 0.6);
            gauss((x2 - w1) / 0.35) + gauss((x2 - w1 + w2) / 0.35)
        }
        DatasetName::Potential4 => {
            let t = (x1 - 1.0) / 0.3;
            let w3 = 3.0 * logistic(t * t);
            gauss((x2 - w1) / 0.4) + gauss((x2 - w1 + w3) / 0.35)
        }
        _ => unreachable!("not a potential"),
    }
}

/// Energy `U(x) = -ln exp(-U(x))` of a potential; `+inf` where the weight underflows.
pub fn potential_energy(name: DatasetName, x: &[f64]) -> Result<f64> {
    if !name.is_potential() {
        return Err(Error::Domain(format!("{name} is not a potential")));
    }
    check_dim(2, x.len())?;
    Ok(-potential_weight(name, x[0], x[1]).ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_integral(spec: &SyntheticSpec, steps: usize) -> f64 {
        let (lo, hi) = spec.bounding_box();
        let hx = (hi[0] - lo[0]) / steps as f64;
        let hy = (hi[1] - lo[1]) / steps as f64;
        let mut s = 0.0;
        for i in 0..steps {
            for j in 0..steps {
                let x = [lo[0] + (i as f64 + 0.5) * hx, lo[1] + (j as f64 + 0.5) * hy];
                s += spec.true_density(&x).unwrap();
            }
        }
        s * hx * hy
    }

    #[test]
    fn names_round_trip() {
        for d in DatasetName::ALL {
            assert_eq!(d.as_str().parse::<DatasetName>().unwrap(), d);
        }
        assert!("nope".parse::<DatasetName>().is_err());
    }

    #[test]
    fn closed_form_values() {
        let mix = SyntheticSpec::new(DatasetName::Mixture2d, 0);
        let c = 1.0 / (TAU * 2f64.sqrt());
        let want = 0.5 * c + 0.5 * c * (-6.75f64).exp();
        assert!((mix.true_density(&[1.0, -1.0]).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.056338).abs() < 1e-5);

        let arc = SyntheticSpec::new(DatasetName::Arc, 0);
        let want = 1.0 / (2.0 * TAU.sqrt()) / TAU.sqrt();
        assert!((arc.true_density(&[0.0, 0.0]).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.07958).abs() < 1e-5);

        let p2 = SyntheticSpec::new(DatasetName::Potential2, 0);
        assert!((p2.true_density(&[0.0, 0.0]).unwrap() - 0.125).abs() < 0.125 * 0.01);
        assert_eq!(p2.true_density(&[4.5, 0.0]).unwrap(), 0.0);
        assert!(matches!(p2.true_density(&[0.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn two_dimensional_densities_integrate_to_one() {
        for name in DatasetName::ALL
            .into_iter()
            .filter(|d| *d != DatasetName::Mixture10d)
        {
            let spec = SyntheticSpec::new(name, 0);
            let total = grid_integral(&spec, 800);
            assert!((total - 1.0).abs() < 1e-2, "{name}: {total}");
        }
    }

    #[test]
    fn mixture10d_spec() {
        let a = make_mixture10d_spec(3);
        assert_eq!(a, make_mixture10d_spec(3));
        assert_ne!(a, make_mixture10d_spec(4));
        let DensityParams::Mixture(m) = &a.params else {
            panic!()
        };
        assert!(m.means.iter().flatten().all(|v| (-0.5..=0.5).contains(v)));
        assert!(m
            .variances
            .iter()
            .flatten()
            .all(|v| (1e-4..=0.25).contains(v)));
        let x = [0.1; 10];
        let direct: f64 = (0..4)
            .map(|k| {
                0.25 * (0..10)
                    .map(|i| {
                        let v = m.variances[k][i];
                        (-(x[i] - m.means[k][i]).powi(2) / (2.0 * v)).exp() / (TAU * v).sqrt()
                    })
                    .product::<f64>()
            })
            .sum();
        assert!((a.true_density(&x).unwrap() - direct).abs() <= 1e-12 * direct);
    }

    #[test]
    fn sampling_is_deterministic_and_in_support() {
        let spec = SyntheticSpec::new(DatasetName::Potential3, 0);
        let a = spec.sample(5000, 9).unwrap();
        assert_eq!(a, spec.sample(5000, 9).unwrap());
        assert_ne!(a, spec.sample(5000, 10).unwrap());
        assert!(a.as_slice().iter().all(|v| v.abs() <= 4.0));
        assert!(spec.sample(0, 1).is_err());
    }

    #[test]
    fn sample_moments() {
        let mix = SyntheticSpec::new(DatasetName::Mixture2d, 0)
            .sample(100_000, 1)
            .unwrap();
        let mean: Vec<f64> = (0..2)
            .map(|k| mix.rows().map(|r| r[k]).sum::<f64>() / mix.len() as f64)
            .collect();
        assert!(
            (mean[0] + 0.5).abs() < 0.05 && (mean[1] - 0.5).abs() < 0.05,
            "{mean:?}"
        );

        let arc = SyntheticSpec::new(DatasetName::Arc, 0)
            .sample(100_000, 2)
            .unwrap();
        let m2 = arc.rows().map(|r| r[1]).sum::<f64>() / 1e5;
        let v2 = arc.rows().map(|r| (r[1] - m2).powi(2)).sum::<f64>() / (1e5 - 1.0);
        assert!((v2 - 4.0).abs() < 0.2, "var {v2}");
    }

    #[test]
    fn potential_histogram_matches_density() {
        let spec = SyntheticSpec::new(DatasetName::Potential1, 0);
        let pts = spec.sample(10_000, 3).unwrap();
        let g = 50;
        let mut hist = vec![0.0; g * g];
        for r in pts.rows() {
            let i = (((r[0] + 4.0) / 8.0 * g as f64) as usize).min(g - 1);
            let j = (((r[1] + 4.0) / 8.0 * g as f64) as usize).min(g - 1);
            hist[i * g + j] += 1.0;
        }
        let dens: Vec<f64> = (0..g * g)
            .map(|k| {
                let x = -4.0 + ((k / g) as f64 + 0.5) * 8.0 / g as f64;
                let y = -4.0 + ((k % g) as f64 + 0.5) * 8.0 / g as f64;
                spec.true_density(&[x, y]).unwrap()
            })
            .collect();
        let corr = pearson(&hist, &dens);
        assert!(corr > 0.95, "corr {corr}");
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn normalizer_stderr_shrinks() {
        let spec = SyntheticSpec::new(DatasetName::Potential2, 0);
        let (z1, e1) = spec.estimate_normalizer(200_000, 5).unwrap();
        let (z2, e2) = spec.estimate_normalizer(400_000, 6).unwrap();
        assert!((z1 - spec.normalizer).abs() < 4.0 * e1);
        assert!((z2 - spec.normalizer).abs() < 4.0 * e2);
        let ratio = e2 / e1;
        assert!(
            (ratio - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.2 * std::f64::consts::FRAC_1_SQRT_2
        );
        assert!(spec.estimate_normalizer(100, 0).is_err());
        assert!(SyntheticSpec::new(DatasetName::Arc, 0)
            .estimate_normalizer(20_000, 0)
            .is_err());
    }

    #[test]
    fn energies() {
        assert_eq!(
            potential_energy(DatasetName::Potential2, &[0.0, 0.0]).unwrap(),
            0.0
        );
        assert!(potential_energy(DatasetName::Arc, &[0.0, 0.0]).is_err());
    }
}
