//! Density-matrix kernel density estimation.
//!
//! Training maps every sample through a random Fourier feature map `phi` and
//! averages the outer products, `rho = (1/n) sum_i phi(x_i) phi(x_i)^T`. A
//! query is scored with the Born rule, `phi(x)^T rho phi(x) / Z` where
//! `Z = (pi / (2 gamma))^(d/2)`. Only the `D × D` matrix is kept, so
//! prediction cost does not depend on the training size.
//!
//! A spectral factorization `rho = V^T diag(lambda) V` truncated to `r` rows
//! gives the `O(D r)` predictor `|diag(lambda)^(1/2) V phi(x)|^2 / Z`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernels::Bandwidth;
use crate::linalg::{matmul, matmul_transposed, symmetric_eigen, symmetrize, syrk_accumulate};
use crate::points::PointSet;
use crate::rff::RffMap;

/// Rows mapped to features at a time while accumulating `rho`.
const FIT_CHUNK: usize = 512;
/// Fixed number of independent partial sums; keeps results identical for any thread count.
const FIT_LANES: usize = 8;
const QUERY_CHUNK: usize = 256;

/// Fraction of `trace(rho)` kept by [`RankRule::Auto`].
pub const AUTO_TRACE_MASS: f64 = 0.999;

/// How many eigenpairs a factorization keeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankRule {
    /// Keep all `D` eigenpairs.
    Full,
    Fixed(usize),
    /// Smallest `r` whose eigenvalue mass reaches the given fraction of the trace.
    TraceMass(f64),
    /// `TraceMass(0.999)`.
    Auto,
}

impl std::str::FromStr for RankRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(RankRule::Auto),
            "full" => Ok(RankRule::Full),
            _ => s.parse::<usize>().map(RankRule::Fixed).map_err(|_| {
                Error::Domain(format!(
                    "rank must be `auto`, `full` or an integer, got {s:?}"
                ))
            }),
        }
    }
}

/// Truncated eigen-decomposition of `rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankFactor {
    /// Non-negative eigenvalues, descending.
    pub values: Vec<f64>,
    /// `r × D` eigenvectors as rows.
    pub vectors: Vec<f64>,
}

impl LowRankFactor {
    pub fn rank(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrixModel {
    map: RffMap,
    bw: Bandwidth,
    n_train: usize,
    rho: Option<Vec<f64>>,
    factor: Option<LowRankFactor>,
}

/// Unnormalized scatter `sum_i phi(x_i) phi(x_i)^T` over `points`, `D × D` row-major.
///
/// The result is exactly symmetric and does not depend on the worker count.
pub fn feature_scatter(map: &RffMap, points: &PointSet) -> Result<Vec<f64>> {
    check_dim(map.dim(), points.dim())?;
    let d = map.features();
    let n = points.len();
    let lanes = FIT_LANES.min(n.div_ceil(FIT_CHUNK)).max(1);
    let per_lane = n.div_ceil(lanes);
    let partials: Vec<Vec<f64>> = (0..lanes)
        .into_par_iter()
        .map(|lane| {
            let start = (lane * per_lane).min(n);
            let end = ((lane + 1) * per_lane).min(n);
            let mut acc = vec![0.0; d * d];
            let mut feats = vec![0.0; FIT_CHUNK * d];
            let mut row = start;
            while row < end {
                let take = FIT_CHUNK.min(end - row);
                for (k, out) in feats.chunks_exact_mut(d).take(take).enumerate() {
                    map.transform_into(points.row(row + k), out);
                }
                syrk_accumulate(&feats[..take * d], take, d, 1.0, &mut acc);
                row += take;
            }
            acc
        })
        .collect();
    let mut iter = partials.into_iter();
    let mut total = iter.next().unwrap_or_else(|| vec![0.0; d * d]);
    for p in iter {
        total.iter_mut().zip(&p).for_each(|(t, v)| *t += v);
    }
    symmetrize(&mut total, d);
    Ok(total)
}

/// Feature Gram matrix over an axis-aligned box, `M_ij = ∫_box phi_i(x) phi_j(x) dx`.
///
/// Uses `2 cos(a) cos(b) = cos(a - b) + cos(a + b)` and the closed form
/// `∫_box cos(v·x + c) dx = cos(c + v·m) prod_k L_k sinc(v_k L_k / 2)`,
/// `m` the box center and `L` its side lengths.
pub fn box_gram(map: &RffMap, lo: &[f64], hi: &[f64]) -> Result<Vec<f64>> {
    let dim = map.dim();
    check_dim(dim, lo.len())?;
    check_dim(dim, hi.len())?;
    if lo
        .iter()
        .zip(hi)
        .any(|(l, h)| l > h || !l.is_finite() || !h.is_finite())
    {
        return Err(Error::Domain(
            "box bounds must be finite with lo <= hi".into(),
        ));
    }
    let d = map.features();
    let center: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect();
    let side: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| h - l).collect();
    let cos_integral = |v: &mut dyn Iterator<Item = f64>, c: f64| {
        let mut phase = c;
        let mut prod = 1.0;
        for (k, vk) in v.enumerate() {
            phase += vk * center[k];
            prod *= side[k] * sinc(0.5 * vk * side[k]);
        }
        phase.cos() * prod
    };
    let scale = 1.0 / d as f64;
    let mut gram = vec![0.0; d * d];
    gram.par_chunks_mut(d).enumerate().for_each(|(i, row)| {
        let wi = map.frequency(i);
        let bi = map.phases()[i];
        for (j, out) in row.iter_mut().enumerate().skip(i) {
            let wj = map.frequency(j);
            let bj = map.phases()[j];
            let minus = cos_integral(&mut wi.iter().zip(wj).map(|(a, b)| a - b), bi - bj);
            let plus = cos_integral(&mut wi.iter().zip(wj).map(|(a, b)| a + b), bi + bj);
            *out = scale * (minus + plus);
        }
    });
    for i in 0..d {
        for j in 0..i {
            gram[i * d + j] = gram[j * d + i];
        }
    }
    Ok(gram)
}

fn sinc(t: f64) -> f64 {
    if t.abs() < 1e-6 {
        1.0 - t * t / 6.0
    } else {
        t.sin() / t
    }
}

impl DensityMatrixModel {
    /// Trains `rho` in one streaming pass over `points`.
    pub fn fit(points: &PointSet, map: RffMap) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Domain(
                "cannot fit a density matrix on zero points".into(),
            ));
        }
        points.check_finite()?;
        let scatter = feature_scatter(&map, points)?;
        Self::from_scatter(map, scatter, points.len())
    }

    /// Builds a model from a precomputed [`feature_scatter`] over `n_train` points.
    pub fn from_scatter(map: RffMap, mut scatter: Vec<f64>, n_train: usize) -> Result<Self> {
        let d = map.features();
        if scatter.len() != d * d {
            return Err(Error::Data(format!(
                "scatter has {} entries, expected {}",
                scatter.len(),
                d * d
            )));
        }
        if n_train == 0 {
            return Err(Error::Domain(
                "cannot fit a density matrix on zero points".into(),
            ));
        }
        let inv = 1.0 / n_train as f64;
        scatter.iter_mut().for_each(|v| *v *= inv);
        let bw = Bandwidth::new(map.gamma(), map.dim())?;
        Ok(Self {
            map,
            bw,
            n_train,
            rho: Some(scatter),
            factor: None,
        })
    }

    /// Reassembles a model from stored parts. At least one of `rho` and `factor` must be present.
    pub fn from_parts(
        map: RffMap,
        n_train: usize,
        rho: Option<Vec<f64>>,
        factor: Option<LowRankFactor>,
    ) -> Result<Self> {
        let d = map.features();
        if rho.is_none() && factor.is_none() {
            return Err(Error::Data(
                "density-matrix model needs rho or a factorization".into(),
            ));
        }
        if rho.as_ref().is_some_and(|r| r.len() != d * d) {
            return Err(Error::Data("rho has the wrong number of entries".into()));
        }
        if let Some(f) = &factor {
            if f.vectors.len() != f.values.len() * d || f.values.is_empty() {
                return Err(Error::Data("factorization has inconsistent shape".into()));
            }
        }
        let bw = Bandwidth::new(map.gamma(), map.dim())?;
        Ok(Self {
            map,
            bw,
            n_train,
            rho,
            factor,
        })
    }

    /// Count-weighted mixture of models sharing one feature map. The result
    /// equals the model fitted on the union of the training sets.
    pub fn mix(models: &[&DensityMatrixModel]) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::Domain("nothing to mix".into()))?;
        let d = first.map.features();
        let total: usize = models.iter().map(|m| m.n_train).sum();
        let mut rho = vec![0.0; d * d];
        for m in models {
            if m.map != first.map {
                return Err(Error::Domain(
                    "can only mix models with identical feature maps".into(),
                ));
            }
            let part = m.rho()?;
            let w = m.n_train as f64 / total as f64;
            rho.iter_mut().zip(part).for_each(|(r, v)| *r += w * v);
        }
        Ok(Self {
            map: first.map.clone(),
            bw: first.bw,
            n_train: total,
            rho: Some(rho),
            factor: None,
        })
    }

    pub fn map(&self) -> &RffMap {
        &self.map
    }

    pub fn bandwidth(&self) -> &Bandwidth {
        &self.bw
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn features(&self) -> usize {
        self.map.features()
    }

    pub fn rho(&self) -> Result<&[f64]> {
        self.rho
            .as_deref()
            .ok_or_else(|| Error::State("density matrix was dropped after factorization".into()))
    }

    pub fn factor(&self) -> Option<&LowRankFactor> {
        self.factor.as_ref()
    }

    pub fn rank(&self) -> Option<usize> {
        self.factor.as_ref().map(LowRankFactor::rank)
    }

    pub fn trace(&self) -> Result<f64> {
        let d = self.features();
        let rho = self.rho()?;
        Ok((0..d).map(|i| rho[i * d + i]).sum())
    }

    /// Born-rule normalizer `(pi / (2 gamma))^(d/2)`.
    pub fn normalizer(&self) -> f64 {
        self.bw.dm_normalizer()
    }

    /// Adds a truncated spectral factorization of `rho`.
    pub fn factorize(&self, rule: RankRule) -> Result<Self> {
        let d = self.features();
        let rho = self.rho()?;
        if let RankRule::Fixed(r) = rule {
            if r == 0 || r > d {
                return Err(Error::Domain(format!("rank must be in 1..={d}, got {r}")));
            }
        }
        if let RankRule::TraceMass(q) = rule {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::Domain(format!(
                    "trace mass must be in (0, 1], got {q}"
                )));
            }
        }
        let eig = symmetric_eigen(rho, d)?;
        let values: Vec<f64> = eig.values.iter().map(|&v| v.max(0.0)).collect();
        let r = match rule {
            RankRule::Full => d,
            RankRule::Fixed(r) => r,
            RankRule::Auto => rank_for_mass(&values, AUTO_TRACE_MASS),
            RankRule::TraceMass(q) => rank_for_mass(&values, q),
        };
        let factor = LowRankFactor {
            values: values[..r].to_vec(),
            vectors: eig.vectors[..r * d].to_vec(),
        };
        Ok(Self {
            factor: Some(factor),
            ..self.clone()
        })
    }

    /// Drops `rho`, keeping only the factorization.
    pub fn into_low_rank(mut self) -> Result<Self> {
        if self.factor.is_none() {
            return Err(Error::State("model has no factorization".into()));
        }
        self.rho = None;
        Ok(self)
    }

    /// `phi(x)^T rho phi(x) / Z`, clamped at zero.
    pub fn estimate(&self, x: &[f64]) -> Result<f64> {
        let rho = self.rho()?;
        let phi = self.map.transform(x)?;
        let d = phi.len();
        let quad: f64 = rho
            .chunks_exact(d)
            .zip(&phi)
            .map(|(row, &pi)| pi * row.iter().zip(&phi).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        Ok((quad / self.normalizer()).max(0.0))
    }

    /// `|diag(lambda)^(1/2) V phi(x)|^2 / Z`.
    pub fn estimate_low_rank(&self, x: &[f64]) -> Result<f64> {
        let factor = self.factor_or_err()?;
        let phi = self.map.transform(x)?;
        let quad: f64 = factor
            .vectors
            .chunks_exact(phi.len())
            .zip(&factor.values)
            .map(|(v, &l)| {
                let p: f64 = v.iter().zip(&phi).map(|(a, b)| a * b).sum();
                l * p * p
            })
            .sum();
        Ok((quad / self.normalizer()).max(0.0))
    }

    pub fn estimate_batch(&self, queries: &PointSet) -> Result<Vec<f64>> {
        let rho = self.rho()?;
        check_dim(self.map.dim(), queries.dim())?;
        let d = self.features();
        let z = self.normalizer();
        Ok(self.batched(queries, |phi, rows, out| {
            let mut t = vec![0.0; rows * d];
            matmul(phi, rho, rows, d, d, &mut t);
            for ((o, p), tr) in out
                .iter_mut()
                .zip(phi.chunks_exact(d))
                .zip(t.chunks_exact(d))
            {
                let quad: f64 = p.iter().zip(tr).map(|(a, b)| a * b).sum();
                *o = (quad / z).max(0.0);
            }
        }))
    }

    pub fn estimate_low_rank_batch(&self, queries: &PointSet) -> Result<Vec<f64>> {
        let factor = self.factor_or_err()?;
        check_dim(self.map.dim(), queries.dim())?;
        let d = self.features();
        let r = factor.rank();
        let z = self.normalizer();
        Ok(self.batched(queries, |phi, rows, out| {
            let mut proj = vec![0.0; rows * r];
            matmul_transposed(phi, &factor.vectors, rows, d, r, &mut proj);
            for (o, p) in out.iter_mut().zip(proj.chunks_exact(r)) {
                let quad: f64 = p.iter().zip(&factor.values).map(|(a, l)| l * a * a).sum();
                *o = (quad / z).max(0.0);
            }
        }))
    }

    /// Integral of the full Born-rule estimate over an axis-aligned box.
    pub fn box_integral(&self, lo: &[f64], hi: &[f64]) -> Result<f64> {
        self.integral_from_gram(&box_gram(&self.map, lo, hi)?)
    }

    /// `sum_ij rho_ij M_ij / Z` for a Gram matrix from [`box_gram`]; falls back
    /// to the factorization when `rho` was dropped.
    pub fn integral_from_gram(&self, gram: &[f64]) -> Result<f64> {
        let d = self.features();
        check_dim(d * d, gram.len())?;
        let quad = match (&self.rho, &self.factor) {
            (Some(rho), _) => rho.iter().zip(gram).map(|(a, b)| a * b).sum::<f64>(),
            (None, Some(f)) => f
                .vectors
                .chunks_exact(d)
                .zip(&f.values)
                .map(|(v, &l)| {
                    let mv: f64 = gram
                        .chunks_exact(d)
                        .zip(v)
                        .map(|(row, &vi)| vi * row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
                        .sum();
                    l * mv
                })
                .sum(),
            (None, None) => {
                return Err(Error::State(
                    "model has neither rho nor a factorization".into(),
                ))
            }
        };
        Ok(quad / self.normalizer())
    }

    fn factor_or_err(&self) -> Result<&LowRankFactor> {
        self.factor
            .as_ref()
            .ok_or_else(|| Error::State("low-rank prediction requires factorize() first".into()))
    }

    /// Maps query chunks to features in parallel and lets `score` fill each output chunk.
    fn batched<F>(&self, queries: &PointSet, score: F) -> Vec<f64>
    where
        F: Fn(&[f64], usize, &mut [f64]) + Sync,
    {
        let d = self.features();
        let dim = queries.dim();
        let mut out = vec![0.0; queries.len()];
        out.par_chunks_mut(QUERY_CHUNK)
            .zip(queries.as_slice().par_chunks(QUERY_CHUNK * dim))
            .for_each(|(o, q)| {
                let rows = o.len();
                let mut phi = vec![0.0; rows * d];
                for (x, p) in q.chunks_exact(dim).zip(phi.chunks_exact_mut(d)) {
                    self.map.transform_into(x, p);
                }
                score(&phi, rows, o);
            });
        out
    }
}

fn rank_for_mass(values: &[f64], mass: f64) -> usize {
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return 1;
    }
    let mut acc = 0.0;
    for (k, v) in values.iter().enumerate() {
        acc += v;
        if acc >= mass * total {
            return k + 1;
        }
    }
    values.len()
}
