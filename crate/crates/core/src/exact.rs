//! Memory-based Gaussian KDE evaluated by direct summation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernels::{sq_dist, Bandwidth};
use crate::points::PointSet;

/// Kernel sums over more points than this use pairwise summation.
pub const PAIRWISE_THRESHOLD: usize = 4096;
const PAIRWISE_BLOCK: usize = 256;

/// How a batch of queries is evaluated. Both strategies compute the same
/// estimator; they differ in scheduling and summation order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExactStrategy {
    /// Queries in parallel, pairwise summation over training points.
    #[default]
    Vectorized,
    /// One query at a time on the calling thread, plain running sum.
    Loop,
}

/// `f(x) = 1 / (n (pi/gamma)^(d/2)) * sum_i exp(-gamma |x - x_i|^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactKde {
    train: PointSet,
    bw: Bandwidth,
    #[serde(default)]
    strategy: ExactStrategy,
}

impl ExactKde {
    pub fn fit(train: PointSet, bw: Bandwidth) -> Result<Self> {
        Self::fit_with_strategy(train, bw, ExactStrategy::default())
    }

    pub fn fit_with_strategy(
        train: PointSet,
        bw: Bandwidth,
        strategy: ExactStrategy,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Domain("cannot fit a KDE on zero points".into()));
        }
        check_dim(bw.dim(), train.dim())?;
        train.check_finite()?;
        Ok(Self {
            train,
            bw,
            strategy,
        })
    }

    pub fn bandwidth(&self) -> &Bandwidth {
        &self.bw
    }

    pub fn train(&self) -> &PointSet {
        &self.train
    }

    pub fn strategy(&self) -> ExactStrategy {
        self.strategy
    }

    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }

    /// Unnormalized kernel sum `sum_i exp(-gamma |x - x_i|^2)`.
    pub fn kernel_sum(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.bw.dim(), x.len())?;
        Ok(self.kernel_sum_unchecked(x))
    }

    fn kernel_sum_unchecked(&self, x: &[f64]) -> f64 {
        let data = self.train.as_slice();
        let dim = self.train.dim();
        match self.strategy {
            ExactStrategy::Loop => naive_sum(data, dim, x, self.bw.gamma()),
            ExactStrategy::Vectorized if self.train.len() > PAIRWISE_THRESHOLD => {
                pairwise_sum(data, dim, x, self.bw.gamma())
            }
            ExactStrategy::Vectorized => naive_sum(data, dim, x, self.bw.gamma()),
        }
    }

    fn scale(&self) -> f64 {
        1.0 / (self.train.len() as f64 * self.bw.kde_normalizer())
    }

    pub fn estimate(&self, x: &[f64]) -> Result<f64> {
        Ok(self.kernel_sum(x)? * self.scale())
    }

    pub fn estimate_batch(&self, queries: &PointSet) -> Result<Vec<f64>> {
        check_dim(self.bw.dim(), queries.dim())?;
        let scale = self.scale();
        Ok(match self.strategy {
            ExactStrategy::Vectorized => queries
                .as_slice()
                .par_chunks_exact(queries.dim())
                .map(|x| self.kernel_sum_unchecked(x) * scale)
                .collect(),
            ExactStrategy::Loop => queries
                .rows()
                .map(|x| self.kernel_sum_unchecked(x) * scale)
                .collect(),
        })
    }
}

fn naive_sum(data: &[f64], dim: usize, x: &[f64], gamma: f64) -> f64 {
    data.chunks_exact(dim)
        .map(|p| (-gamma * sq_dist(p, x)).exp())
        .sum()
}

fn pairwise_sum(data: &[f64], dim: usize, x: &[f64], gamma: f64) -> f64 {
    let n = data.len() / dim;
    if n <= PAIRWISE_BLOCK {
        naive_sum(data, dim, x, gamma)
    } else {
        let (a, b) = data.split_at(n / 2 * dim);
        pairwise_sum(a, dim, x, gamma) + pairwise_sum(b, dim, x, gamma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_points(n: usize, d: usize, seed: u64) -> PointSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointSet::new(d, (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn hand_values() {
        let bw = Bandwidth::new(0.5, 2).unwrap();
        let m = ExactKde::fit(PointSet::from_rows(&[[0.0, 0.0]]).unwrap(), bw).unwrap();
        assert!((m.estimate(&[0.0, 0.0]).unwrap() - 1.0 / (2.0 * PI)).abs() < 1e-15);
        assert_eq!(m.len(), 1);

        let m = ExactKde::fit(PointSet::from_rows(&[[0.0, 0.0], [1.0, 0.0]]).unwrap(), bw).unwrap();
        let want = (1.0 + (-0.5f64).exp()) / (2.0 * 2.0 * PI);
        assert!((m.estimate(&[0.0, 0.0]).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.127833).abs() < 2e-5);
        assert_eq!(m.estimate(&[1e6, 1e6]).unwrap(), 0.0);
    }

    #[test]
    fn fit_errors() {
        let bw = Bandwidth::new(1.0, 2).unwrap();
        assert!(matches!(
            ExactKde::fit(PointSet::empty(2).unwrap(), bw),
            Err(Error::Domain(_))
        ));
        let bad = PointSet::new(2, vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(ExactKde::fit(bad, bw), Err(Error::Data(_))));
        let wrong_dim = PointSet::new(3, vec![0.0; 3]).unwrap();
        assert!(matches!(
            ExactKde::fit(wrong_dim, bw),
            Err(Error::Shape { .. })
        ));
        let m = ExactKde::fit(random_points(5, 2, 0), bw).unwrap();
        assert!(matches!(m.estimate(&[0.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn batch_matches_loop() {
        let bw = Bandwidth::new(0.8, 2).unwrap();
        let train = random_points(100, 2, 1);
        let q = random_points(50, 2, 2);
        let m = ExactKde::fit(train.clone(), bw).unwrap();
        let batch = m.estimate_batch(&q).unwrap();
        for (x, b) in q.rows().zip(&batch) {
            let mut s = 0.0;
            for p in train.rows() {
                s += (-0.8 * sq_dist(p, x)).exp();
            }
            let want = s / (100.0 * bw.kde_normalizer());
            assert!((b - want).abs() <= 1e-12 * want);
        }
        let one = PointSet::from_rows(&[q.row(3)]).unwrap();
        assert_eq!(
            m.estimate_batch(&one).unwrap(),
            vec![m.estimate(q.row(3)).unwrap()]
        );
        let twice = PointSet::from_rows(&[q.row(3), q.row(3)]).unwrap();
        let out = m.estimate_batch(&twice).unwrap();
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn strategies_agree_above_pairwise_threshold() {
        let bw = Bandwidth::new(0.3, 3).unwrap();
        let train = random_points(10_000, 3, 3);
        let q = random_points(20, 3, 4);
        let fast = ExactKde::fit(train.clone(), bw)
            .unwrap()
            .estimate_batch(&q)
            .unwrap();
        let slow = ExactKde::fit_with_strategy(train, bw, ExactStrategy::Loop)
            .unwrap()
            .estimate_batch(&q)
            .unwrap();
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-12 * b);
        }
    }

    #[test]
    fn permutation_invariance() {
        let bw = Bandwidth::new(1.3, 2).unwrap();
        let train = random_points(6000, 2, 5);
        let mut idx: Vec<usize> = (0..train.len()).rev().collect();
        idx.swap(0, 17);
        let shuffled = train.select(&idx);
        let a = ExactKde::fit(train, bw).unwrap();
        let b = ExactKde::fit(shuffled, bw).unwrap();
        let q = random_points(30, 2, 6);
        for x in q.rows() {
            let (u, v) = (a.estimate(x).unwrap(), b.estimate(x).unwrap());
            assert!((u - v).abs() <= 1e-12 * u.max(v));
        }
    }

    #[test]
    fn integrates_to_one() {
        let bw = Bandwidth::new(2.0, 2).unwrap();
        let train = random_points(50, 2, 7);
        let m = ExactKde::fit(train.clone(), bw).unwrap();
        let (lo, hi) = train.bounds();
        let pad = 6.0 * bw.sigma();
        let steps = 300;
        let hx = (hi[0] - lo[0] + 2.0 * pad) / steps as f64;
        let hy = (hi[1] - lo[1] + 2.0 * pad) / steps as f64;
        let mut total = 0.0;
        for i in 0..steps {
            for j in 0..steps {
                let x = lo[0] - pad + (i as f64 + 0.5) * hx;
                let y = lo[1] - pad + (j as f64 + 0.5) * hy;
                total += m.estimate(&[x, y]).unwrap();
            }
        }
        assert!((total * hx * hy - 1.0).abs() < 1e-2);
    }
}
