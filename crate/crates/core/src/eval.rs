//! Evaluation protocol: MAE against the true density, k-fold
//! cross-validation of the bandwidth (and feature count), prediction timing,
//! and the experiment grid that ties them together.

use std::io::Write;
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dm::{box_gram, feature_scatter, DensityMatrixModel};
use crate::error::{Error, Result};
use crate::estimator::{DensityEstimator, EstimatorConfig, EstimatorKind, Model};
use crate::points::PointSet;
use crate::rff::RffMap;
use crate::seed::derive_seed;
use crate::synthetic::{DatasetName, SyntheticSpec};

/// Held-out densities are floored here before taking logs.
pub const LOG_DENSITY_FLOOR: f64 = 1e-300;

/// Serializes timing sections across threads so measurements do not overlap.
static TIMING_LOCK: Mutex<()> = Mutex::new(());

pub fn mean_absolute_error(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Domain("MAE of zero values".into()));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// `[2^lo, 2^(lo+1), ..., 2^hi]`.
pub fn gamma_grid(lo: i32, hi: i32) -> Vec<f64> {
    (lo..=hi).map(|e| 2f64.powi(e)).collect()
}

/// Splits `0..n` into `folds` groups of near-equal size after a seeded shuffle.
pub fn fold_partition(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::Domain(format!("need at least 2 folds, got {folds}")));
    }
    if n < folds {
        return Err(Error::Domain(format!(
            "{n} points cannot fill {folds} folds"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..folds)
        .map(|k| perm[k * n / folds..(k + 1) * n / folds].to_vec())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    pub gamma: f64,
    pub features: Option<usize>,
    /// Mean held-out log-density.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub best_gamma: f64,
    pub best_features: Option<usize>,
    pub table: Vec<CvCell>,
}

/// Chooses the bandwidth (and, for density-matrix kinds, the feature count)
/// that maximizes mean held-out log-density over `folds` folds.
///
/// Density-matrix kinds are scored with the full Born rule, renormalized to
/// unit mass over [`cv_box`]. Without that step the score is degenerate: the
/// random-feature estimate carries a floor of roughly `1 / (D Z)` everywhere,
/// which grows with `gamma` and lets an ever-narrower kernel buy held-out
/// likelihood with mass it does not have. Per-fold training matrices come from
/// per-fold feature scatters (total minus fold `k`), so each grid point costs
/// one pass over the data instead of one per fold.
pub fn cross_validate(
    points: &PointSet,
    config: &EstimatorConfig,
    gamma_grid: &[f64],
    feature_grid: &[usize],
    folds: usize,
    seed: u64,
) -> Result<CvResult> {
    if gamma_grid.is_empty() {
        return Err(Error::Domain("empty bandwidth grid".into()));
    }
    if config.kind.uses_rff() && feature_grid.is_empty() {
        return Err(Error::Domain("empty feature-count grid".into()));
    }
    let parts = fold_partition(points.len(), folds, derive_seed(seed, &["folds"]))?;
    let held_out: Vec<PointSet> = parts.iter().map(|idx| points.select(idx)).collect();
    let complements: Vec<PointSet> = (0..folds)
        .map(|k| {
            let idx: Vec<usize> = parts
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != k)
                .flat_map(|(_, p)| p.iter().copied())
                .collect();
            points.select(&idx)
        })
        .collect();

    let mut table = Vec::new();
    if config.kind.uses_rff() {
        let (lo, hi) = cv_box(points);
        for &features in feature_grid {
            for &gamma in gamma_grid {
                let map =
                    RffMap::sample(points.dim(), features, gamma, derive_seed(seed, &["rff"]))?;
                let gram = box_gram(&map, &lo, &hi)?;
                let scatters: Vec<Vec<f64>> = held_out
                    .iter()
                    .map(|p| feature_scatter(&map, p))
                    .collect::<Result<_>>()?;
                let mut total = vec![0.0; features * features];
                for s in &scatters {
                    total.iter_mut().zip(s).for_each(|(t, v)| *t += v);
                }
                let mut log_sum = 0.0;
                for (k, test) in held_out.iter().enumerate() {
                    let train: Vec<f64> =
                        total.iter().zip(&scatters[k]).map(|(t, s)| t - s).collect();
                    let model = DensityMatrixModel::from_scatter(
                        map.clone(),
                        train,
                        points.len() - test.len(),
                    )?;
                    let mass = model.integral_from_gram(&gram)?.max(LOG_DENSITY_FLOOR);
                    log_sum += log_density_sum(&model.estimate_batch(test)?)
                        - test.len() as f64 * mass.ln();
                }
                table.push(CvCell {
                    gamma,
                    features: Some(features),
                    score: log_sum / points.len() as f64,
                });
            }
        }
    } else {
        // The single-threaded loop is the same estimator as `raw`; score with the parallel one.
        let mut scoring = *config;
        if scoring.kind == EstimatorKind::Naive {
            scoring.kind = EstimatorKind::Raw;
        }
        for &gamma in gamma_grid {
            let mut log_sum = 0.0;
            for (train, test) in complements.iter().zip(&held_out) {
                let model = Model::fit(&scoring, train, gamma, 1, 0)?;
                log_sum += log_density_sum(&model.estimate_batch(test)?);
            }
            table.push(CvCell {
                gamma,
                features: None,
                score: log_sum / points.len() as f64,
            });
        }
    }

    let best = table
        .iter()
        .fold(None::<&CvCell>, |acc, c| match acc {
            Some(b) if b.score >= c.score => Some(b),
            _ => Some(c),
        })
        .expect("grid is non-empty");
    Ok(CvResult {
        best_gamma: best.gamma,
        best_features: best.features,
        table,
    })
}

/// Bounding box of `points` padded by a tenth of its extent on every side.
pub fn cv_box(points: &PointSet) -> (Vec<f64>, Vec<f64>) {
    let (mut lo, mut hi) = points.bounds();
    for (l, h) in lo.iter_mut().zip(hi.iter_mut()) {
        let pad = (0.1 * (*h - *l)).max(1e-3);
        *l -= pad;
        *h += pad;
    }
    (lo, hi)
}

fn log_density_sum(values: &[f64]) -> f64 {
    values.iter().map(|v| v.max(LOG_DENSITY_FLOOR).ln()).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub times_ms: Vec<f64>,
    pub median_ms: f64,
    pub std_ms: f64,
}

/// Times batch prediction: one warm-up run, then `repeats` measured runs.
/// Fails if any run's output differs from the warm-up.
pub fn benchmark_predict(
    estimator: &dyn DensityEstimator,
    queries: &PointSet,
    repeats: usize,
) -> Result<(Vec<f64>, TimingStats)> {
    if repeats < 3 {
        return Err(Error::Domain(format!(
            "need at least 3 timing repeats, got {repeats}"
        )));
    }
    let _guard = TIMING_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let reference = estimator.estimate_batch(queries)?;
    let mut times_ms = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let out = estimator.estimate_batch(queries)?;
        times_ms.push(start.elapsed().as_secs_f64() * 1e3);
        if out
            .iter()
            .zip(&reference)
            .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err(Error::Internal(
                "prediction changed between timing repeats".into(),
            ));
        }
    }
    let median_ms = median(&times_ms);
    let mean = times_ms.iter().sum::<f64>() / repeats as f64;
    let std_ms =
        (times_ms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64).sqrt();
    Ok((
        reference,
        TimingStats {
            times_ms,
            median_ms,
            std_ms,
        },
    ))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One row of the benchmark report. Column order of the CSV output follows
/// the field order here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub estimator: String,
    pub n_train: usize,
    pub n_test: usize,
    /// Repeat index of this cell.
    pub repeat: usize,
    pub seed: u64,
    pub gamma: Option<f64>,
    pub rff_dim: Option<usize>,
    pub rank: Option<usize>,
    pub mae: Option<f64>,
    /// Standard error of the mean absolute error over test points.
    pub mae_std: Option<f64>,
    pub predict_time_ms: Option<f64>,
    pub time_std: Option<f64>,
    pub repeats: usize,
    pub error: Option<String>,
}

/// Missing fields in a serialized config fall back to the desk preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub datasets: Vec<DatasetName>,
    pub estimators: Vec<EstimatorConfig>,
    pub sizes: Vec<usize>,
    pub test_size: usize,
    /// Independent repetitions of every cell.
    pub seeds: usize,
    pub master_seed: u64,
    pub folds: usize,
    /// Bandwidth grid exponents: `gamma in {2^lo, ..., 2^hi}`.
    pub gamma_exponents: (i32, i32),
    pub feature_grid: Vec<usize>,
    pub timing_repeats: usize,
    /// Skip cross-validation and use this bandwidth.
    pub fixed_gamma: Option<f64>,
    /// Skip the feature-count search and use this many features.
    pub fixed_features: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// All seven data sets, the six table estimators, `n` in 10..10^4,
    /// 10^3 test points and a pruned bandwidth grid.
    pub fn desk() -> Self {
        Self {
            datasets: DatasetName::ALL.to_vec(),
            estimators: [
                EstimatorKind::Raw,
                EstimatorKind::Naive,
                EstimatorKind::TreeMidpoint,
                EstimatorKind::TreeBall,
                EstimatorKind::TreeKd,
                EstimatorKind::DmkdeLr,
            ]
            .into_iter()
            .map(EstimatorConfig::new)
            .collect(),
            sizes: vec![10, 100, 1_000, 10_000],
            test_size: 1_000,
            seeds: 1,
            master_seed: 0,
            folds: 5,
            gamma_exponents: (-10, 10),
            feature_grid: vec![50, 100, 500, 1000],
            timing_repeats: 3,
            fixed_gamma: None,
            fixed_features: None,
        }
    }

    /// The full protocol: `n` up to 10^5, 10^4 test points, the complete
    /// `2^-20..2^20` grid and five repetitions. Takes many hours.
    pub fn paper() -> Self {
        Self {
            sizes: vec![10, 100, 1_000, 10_000, 100_000],
            test_size: 10_000,
            seeds: 5,
            gamma_exponents: (-20, 20),
            timing_repeats: 5,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() || self.estimators.is_empty() || self.sizes.is_empty() {
            return Err(Error::Domain("experiment grid has an empty axis".into()));
        }
        if self.sizes.contains(&0) || self.test_size == 0 || self.seeds == 0 {
            return Err(Error::Domain(
                "sizes, test size and seed count must be positive".into(),
            ));
        }
        if self.gamma_exponents.0 > self.gamma_exponents.1 {
            return Err(Error::Domain("empty bandwidth grid".into()));
        }
        if self.feature_grid.is_empty() && self.fixed_features.is_none() {
            return Err(Error::Domain("empty feature-count grid".into()));
        }
        if self.folds < 2 {
            return Err(Error::Domain("need at least 2 folds".into()));
        }
        if self.timing_repeats < 3 {
            return Err(Error::Domain("need at least 3 timing repeats".into()));
        }
        Ok(())
    }
}

/// Per-cell outputs beyond the report row, kept for callers that want to
/// recheck the numbers.
#[derive(Debug, Clone)]
pub struct CellOutput {
    pub report: EvalReport,
    pub predictions: Vec<f64>,
    pub truth: Vec<f64>,
}

/// Runs every (data set, size, repeat, estimator) cell. Failures are recorded
/// in the row's `error` column and the grid moves on.
pub fn run_experiment_grid(config: &ExperimentConfig) -> Result<Vec<EvalReport>> {
    Ok(run_experiment_grid_detailed(config)?
        .into_iter()
        .map(|c| c.report)
        .collect())
}

pub fn run_experiment_grid_detailed(config: &ExperimentConfig) -> Result<Vec<CellOutput>> {
    config.validate()?;
    let gammas = gamma_grid(config.gamma_exponents.0, config.gamma_exponents.1);
    let mut out = Vec::new();
    for &dataset in &config.datasets {
        let spec = SyntheticSpec::new(
            dataset,
            derive_seed(config.master_seed, &["spec", dataset.as_str()]),
        );
        for &n in &config.sizes {
            for repeat in 0..config.seeds {
                let tag = [dataset.as_str(), &n.to_string(), &repeat.to_string()];
                let data = spec
                    .sample(
                        n,
                        derive_seed(config.master_seed, &[&tag[..], &["train"]].concat()),
                    )
                    .and_then(|train| {
                        let test = spec.sample(
                            config.test_size,
                            derive_seed(config.master_seed, &[&tag[..], &["test"]].concat()),
                        )?;
                        let truth = spec.true_density_batch(&test)?;
                        Ok((train, test, truth))
                    });
                for est in &config.estimators {
                    let seed = derive_seed(
                        config.master_seed,
                        &[
                            dataset.as_str(),
                            est.kind.as_str(),
                            &n.to_string(),
                            &repeat.to_string(),
                        ],
                    );
                    let mut report = EvalReport {
                        dataset: dataset.to_string(),
                        estimator: est.kind.to_string(),
                        n_train: n,
                        n_test: config.test_size,
                        repeat,
                        seed,
                        gamma: None,
                        rff_dim: None,
                        rank: None,
                        mae: None,
                        mae_std: None,
                        predict_time_ms: None,
                        time_std: None,
                        repeats: config.timing_repeats,
                        error: None,
                    };
                    let result = match &data {
                        Ok((train, test, truth)) => {
                            run_cell(config, &gammas, est, train, test, truth, seed, &mut report)
                        }
                        Err(e) => Err(Error::Internal(format!("data generation failed: {e}"))),
                    };
                    match result {
                        Ok((predictions, truth)) => {
                            info!(
                                "{} {} n={} rep={}: gamma={:?} D={:?} mae={:.3e} time={:.3}ms",
                                report.dataset,
                                report.estimator,
                                n,
                                repeat,
                                report.gamma,
                                report.rff_dim,
                                report.mae.unwrap_or(f64::NAN),
                                report.predict_time_ms.unwrap_or(f64::NAN)
                            );
                            out.push(CellOutput {
                                report,
                                predictions,
                                truth,
                            });
                        }
                        Err(e) => {
                            warn!(
                                "{} {} n={} rep={} failed: {e}",
                                report.dataset, report.estimator, n, repeat
                            );
                            report.error = Some(e.to_string());
                            out.push(CellOutput {
                                report,
                                predictions: vec![],
                                truth: vec![],
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    config: &ExperimentConfig,
    gammas: &[f64],
    est: &EstimatorConfig,
    train: &PointSet,
    test: &PointSet,
    truth: &[f64],
    seed: u64,
    report: &mut EvalReport,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let feature_grid = match config.fixed_features {
        Some(f) => vec![f],
        None => config.feature_grid.clone(),
    };
    let (gamma, features) = match config.fixed_gamma {
        Some(g) => (g, feature_grid[0]),
        None => {
            let folds = config.folds.min(train.len());
            let cv = cross_validate(train, est, gammas, &feature_grid, folds, seed)?;
            (cv.best_gamma, cv.best_features.unwrap_or(feature_grid[0]))
        }
    };
    report.gamma = Some(gamma);
    let model = Model::fit(est, train, gamma, features, derive_seed(seed, &["rff"]))?;
    report.rff_dim = model.features();
    report.rank = model.rank();
    let (pred, timing) = benchmark_predict(&model, test, config.timing_repeats)?;
    let mae = mean_absolute_error(&pred, truth)?;
    let m = pred.len() as f64;
    let abs: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).collect();
    let var = if abs.len() > 1 {
        abs.iter().map(|a| (a - mae).powi(2)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    report.mae = Some(mae);
    report.mae_std = Some((var / m).sqrt());
    report.predict_time_ms = Some(timing.median_ms);
    report.time_std = Some(timing.std_ms);
    Ok((pred, truth.to_vec()))
}

pub fn write_reports_csv<W: Write>(reports: &[EvalReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_reports_jsonl<W: Write>(reports: &[EvalReport], mut writer: W) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Median over repeats per (dataset, estimator, n): the series plotted against `log10 n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub dataset: String,
    pub estimator: String,
    pub n: usize,
    pub mae_median: f64,
    pub time_median: f64,
}

pub fn aggregate(reports: &[EvalReport]) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, String, usize)> = Vec::new();
    for r in reports {
        let key = (r.dataset.clone(), r.estimator.clone(), r.n_train);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .filter_map(|(dataset, estimator, n)| {
            let cells: Vec<&EvalReport> = reports
                .iter()
                .filter(|r| {
                    r.dataset == dataset
                        && r.estimator == estimator
                        && r.n_train == n
                        && r.error.is_none()
                })
                .collect();
            if cells.is_empty() {
                return None;
            }
            let maes: Vec<f64> = cells.iter().filter_map(|r| r.mae).collect();
            let times: Vec<f64> = cells.iter().filter_map(|r| r.predict_time_ms).collect();
            Some(AggregateRow {
                dataset,
                estimator,
                n,
                mae_median: median(&maes),
                time_median: median(&times),
            })
        })
        .collect()
}

pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::ExactKde;
    use crate::kernels::Bandwidth;
    use rand::Rng;

    #[test]
    fn mae_values() {
        assert_eq!(mean_absolute_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mean_absolute_error(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert!(mean_absolute_error(&[0.0], &[1.0, 0.0]).is_err());
        assert!(mean_absolute_error(&[], &[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        let mut s = 0.0;
        for i in 0..a.len() {
            s += (a[i] - b[i]).abs();
        }
        assert!((mean_absolute_error(&a, &b).unwrap() - s / 1e4).abs() < 1e-12);
    }

    #[test]
    fn folds_partition_indices() {
        let parts = fold_partition(103, 5, 7).unwrap();
        let mut seen = vec![0; 103];
        for p in &parts {
            assert!((20..=21).contains(&p.len()));
            p.iter().for_each(|&i| seen[i] += 1);
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert!(fold_partition(3, 5, 0).is_err());
        assert!(fold_partition(10, 1, 0).is_err());
    }

    #[test]
    fn grid() {
        assert_eq!(gamma_grid(-2, 2), vec![0.25, 0.5, 1.0, 2.0, 4.0]);
        assert_eq!(gamma_grid(-20, 20).len(), 41);
    }

    #[test]
    fn singleton_grid_is_best() {
        let spec = SyntheticSpec::new(DatasetName::Mixture2d, 0);
        let pts = spec.sample(50, 1).unwrap();
        for kind in [EstimatorKind::Raw, EstimatorKind::Dmkde] {
            let cv =
                cross_validate(&pts, &EstimatorConfig::new(kind), &[0.7], &[64], 5, 0).unwrap();
            assert_eq!(cv.best_gamma, 0.7);
            assert_eq!(cv.table.len(), 1);
        }
        assert!(cross_validate(
            &pts,
            &EstimatorConfig::new(EstimatorKind::Raw),
            &[],
            &[],
            5,
            0
        )
        .is_err());
    }

    #[test]
    fn extreme_bandwidth_scores_worse() {
        let spec = SyntheticSpec::new(DatasetName::Mixture2d, 0);
        let pts = spec.sample(400, 2).unwrap();
        let cv = cross_validate(
            &pts,
            &EstimatorConfig::new(EstimatorKind::Raw),
            &[1.0, 2f64.powi(20)],
            &[],
            5,
            1,
        )
        .unwrap();
        assert!(cv.table[1].score < cv.table[0].score);
        assert_eq!(cv.best_gamma, 1.0);
    }

    #[test]
    fn dm_cv_scatter_shortcut_matches_direct_fits() {
        let spec = SyntheticSpec::new(DatasetName::Arc, 0);
        let pts = spec.sample(120, 3).unwrap();
        let cfg = EstimatorConfig::new(EstimatorKind::Dmkde);
        let cv = cross_validate(&pts, &cfg, &[0.5], &[40], 4, 11).unwrap();
        let parts = fold_partition(120, 4, derive_seed(11, &["folds"])).unwrap();
        let map = RffMap::sample(2, 40, 0.5, derive_seed(11, &["rff"])).unwrap();
        let mut total = 0.0;
        for k in 0..4 {
            let train_idx: Vec<usize> = (0..4)
                .filter(|&j| j != k)
                .flat_map(|j| parts[j].clone())
                .collect();
            let m = DensityMatrixModel::fit(&pts.select(&train_idx), map.clone()).unwrap();
            let (lo, hi) = cv_box(&pts);
            let mass = m.box_integral(&lo, &hi).unwrap();
            total += log_density_sum(&m.estimate_batch(&pts.select(&parts[k])).unwrap())
                - parts[k].len() as f64 * mass.ln();
        }
        assert!((cv.table[0].score - total / 120.0).abs() < 1e-9);
    }

    #[test]
    fn dm_cv_avoids_degenerate_narrow_kernels() {
        let spec = SyntheticSpec::new(DatasetName::Mixture2d, 0);
        let pts = spec.sample(500, 5).unwrap();
        let cv = cross_validate(
            &pts,
            &EstimatorConfig::new(EstimatorKind::Dmkde),
            &gamma_grid(-4, 8),
            &[100],
            5,
            2,
        )
        .unwrap();
        assert!(cv.best_gamma <= 4.0, "picked gamma {}", cv.best_gamma);
    }

    #[test]
    fn benchmark_protocol() {
        let pts = SyntheticSpec::new(DatasetName::Arc, 0)
            .sample(200, 4)
            .unwrap();
        let m = ExactKde::fit(pts.clone(), Bandwidth::new(1.0, 2).unwrap()).unwrap();
        let (out, t) = benchmark_predict(&m, &pts, 3).unwrap();
        assert_eq!(t.times_ms.len(), 3);
        assert_eq!(out.len(), 200);
        assert!(t.median_ms > 0.0);
        assert!(benchmark_predict(&m, &pts, 2).is_err());
    }

    #[test]
    fn grid_cardinality_and_consistency() {
        let config = ExperimentConfig {
            datasets: vec![DatasetName::Mixture2d],
            estimators: vec![EstimatorConfig::new(EstimatorKind::Raw)],
            sizes: vec![200],
            test_size: 100,
            seeds: 2,
            gamma_exponents: (-2, 2),
            ..ExperimentConfig::desk()
        };
        let cells = run_experiment_grid_detailed(&config).unwrap();
        assert_eq!(cells.len(), 2);
        for c in &cells {
            assert!(c.report.error.is_none());
            let manual = mean_absolute_error(&c.predictions, &c.truth).unwrap();
            assert!((manual - c.report.mae.unwrap()).abs() <= 1e-12);
        }
        let again = run_experiment_grid(&config).unwrap();
        for (a, b) in cells.iter().zip(&again) {
            assert_eq!(a.report.mae, b.mae);
            assert_eq!(a.report.gamma, b.gamma);
        }
        let agg = aggregate(&again);
        assert_eq!(agg.len(), 1);
        let mut buf = Vec::new();
        write_reports_csv(&again, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text
            .starts_with("dataset,estimator,n_train,n_test,repeat,seed,gamma,rff_dim,rank,mae,"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn failing_cells_are_recorded() {
        let config = ExperimentConfig {
            datasets: vec![DatasetName::Arc],
            estimators: vec![EstimatorConfig {
                rank: crate::dm::RankRule::Fixed(10_000),
                ..EstimatorConfig::new(EstimatorKind::DmkdeLr)
            }],
            sizes: vec![50],
            test_size: 20,
            fixed_gamma: Some(1.0),
            fixed_features: Some(32),
            ..ExperimentConfig::desk()
        };
        let reports = run_experiment_grid(&config).unwrap();
        assert_eq!(reports.len(), 1);
        assert!(reports[0].error.is_some());
        assert!(aggregate(&reports).is_empty());
    }
}
