//! A common face over all estimators, plus the model file format.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dm::{DensityMatrixModel, LowRankFactor, RankRule};
use crate::error::{Error, Result};
use crate::exact::{ExactKde, ExactStrategy};
use crate::kernels::Bandwidth;
use crate::points::PointSet;
use crate::rff::RffMap;
use crate::tree::{
    SpatialTree, SplitRule, TreeKde, TreeKind, DEFAULT_ATOL, DEFAULT_LEAF_SIZE, DEFAULT_RTOL,
};

pub const MODEL_FORMAT_VERSION: u32 = 1;

pub trait DensityEstimator: Send + Sync {
    fn dim(&self) -> usize;
    fn estimate(&self, x: &[f64]) -> Result<f64>;
    fn estimate_batch(&self, queries: &PointSet) -> Result<Vec<f64>>;
}

impl DensityEstimator for ExactKde {
    fn dim(&self) -> usize {
        self.bandwidth().dim()
    }
    fn estimate(&self, x: &[f64]) -> Result<f64> {
        ExactKde::estimate(self, x)
    }
    fn estimate_batch(&self, queries: &PointSet) -> Result<Vec<f64>> {
        ExactKde::estimate_batch(self, queries)
    }
}

impl DensityEstimator for TreeKde {
    fn dim(&self) -> usize {
        self.tree().bandwidth().dim()
    }
    fn estimate(&self, x: &[f64]) -> Result<f64> {
        TreeKde::estimate(self, x)
    }
    fn estimate_batch(&self, queries: &PointSet) -> Result<Vec<f64>> {
        TreeKde::estimate_batch(self, queries)
    }
}

impl DensityEstimator for DensityMatrixModel {
    fn dim(&self) -> usize {
        self.map().dim()
    }
    fn estimate(&self, x: &[f64]) -> Result<f64> {
        DensityMatrixModel::estimate(self, x)
    }
    fn estimate_batch(&self, queries: &PointSet) -> Result<Vec<f64>> {
        DensityMatrixModel::estimate_batch(self, queries)
    }
}

/// The estimator families compared by the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// Exact KDE, parallel pairwise summation.
    Raw,
    /// Exact KDE, single-threaded per-point loop.
    Naive,
    /// kd-tree, median split.
    TreeKd,
    /// kd-tree, sliding-midpoint split.
    TreeMidpoint,
    TreeBall,
    /// Density matrix, full Born rule.
    Dmkde,
    /// Density matrix, truncated spectral factorization.
    DmkdeLr,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 7] = [
        EstimatorKind::Raw,
        EstimatorKind::Naive,
        EstimatorKind::TreeMidpoint,
        EstimatorKind::TreeBall,
        EstimatorKind::TreeKd,
        EstimatorKind::Dmkde,
        EstimatorKind::DmkdeLr,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::Raw => "raw",
            EstimatorKind::Naive => "naive",
            EstimatorKind::TreeKd => "tree-kd",
            EstimatorKind::TreeMidpoint => "tree-midpoint",
            EstimatorKind::TreeBall => "tree-ball",
            EstimatorKind::Dmkde => "dmkde",
            EstimatorKind::DmkdeLr => "dmkde-lr",
        }
    }

    pub fn uses_rff(&self) -> bool {
        matches!(self, EstimatorKind::Dmkde | EstimatorKind::DmkdeLr)
    }

    pub fn is_tree(&self) -> bool {
        matches!(
            self,
            EstimatorKind::TreeKd | EstimatorKind::TreeMidpoint | EstimatorKind::TreeBall
        )
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Domain(format!("unknown estimator {s:?}")))
    }
}

/// Everything needed to fit an estimator except the bandwidth and feature count,
/// which are chosen per data set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub leaf_size: usize,
    pub atol: f64,
    pub rtol: f64,
    pub rank: RankRule,
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind) -> Self {
        Self {
            kind,
            leaf_size: DEFAULT_LEAF_SIZE,
            atol: DEFAULT_ATOL,
            rtol: DEFAULT_RTOL,
            rank: RankRule::Auto,
        }
    }
}

/// A fitted estimator of any kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Exact(ExactKde),
    Tree {
        kind: EstimatorKind,
        kde: TreeKde,
    },
    DensityMatrix {
        model: DensityMatrixModel,
        low_rank: bool,
    },
}

impl Model {
    /// Fits `config.kind` on `train`. `features` and `seed` are only used by
    /// the density-matrix kinds.
    pub fn fit(
        config: &EstimatorConfig,
        train: &PointSet,
        gamma: f64,
        features: usize,
        seed: u64,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Domain("cannot fit on zero points".into()));
        }
        let bw = Bandwidth::new(gamma, train.dim())?;
        Ok(match config.kind {
            EstimatorKind::Raw => Model::Exact(ExactKde::fit(train.clone(), bw)?),
            EstimatorKind::Naive => Model::Exact(ExactKde::fit_with_strategy(
                train.clone(),
                bw,
                ExactStrategy::Loop,
            )?),
            EstimatorKind::TreeKd | EstimatorKind::TreeMidpoint | EstimatorKind::TreeBall => {
                let (kind, split) = tree_layout(config.kind);
                let tree = SpatialTree::build(train, kind, split, config.leaf_size, bw)?;
                Model::Tree {
                    kind: config.kind,
                    kde: TreeKde::new(tree, config.atol, config.rtol)?,
                }
            }
            EstimatorKind::Dmkde => Model::DensityMatrix {
                model: DensityMatrixModel::fit(
                    train,
                    RffMap::sample(train.dim(), features, gamma, seed)?,
                )?,
                low_rank: false,
            },
            EstimatorKind::DmkdeLr => {
                let full = DensityMatrixModel::fit(
                    train,
                    RffMap::sample(train.dim(), features, gamma, seed)?,
                )?;
                Model::DensityMatrix {
                    model: full.factorize(config.rank)?.into_low_rank()?,
                    low_rank: true,
                }
            }
        })
    }

    pub fn kind(&self) -> EstimatorKind {
        match self {
            Model::Exact(m) => match m.strategy() {
                ExactStrategy::Vectorized => EstimatorKind::Raw,
                ExactStrategy::Loop => EstimatorKind::Naive,
            },
            Model::Tree { kind, .. } => *kind,
            Model::DensityMatrix {
                low_rank: false, ..
            } => EstimatorKind::Dmkde,
            Model::DensityMatrix { low_rank: true, .. } => EstimatorKind::DmkdeLr,
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            Model::Exact(m) => m.bandwidth().gamma(),
            Model::Tree { kde, .. } => kde.tree().bandwidth().gamma(),
            Model::DensityMatrix { model, .. } => model.bandwidth().gamma(),
        }
    }

    pub fn features(&self) -> Option<usize> {
        match self {
            Model::DensityMatrix { model, .. } => Some(model.features()),
            _ => None,
        }
    }

    pub fn rank(&self) -> Option<usize> {
        match self {
            Model::DensityMatrix {
                model,
                low_rank: true,
            } => model.rank(),
            _ => None,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_json(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_json(BufReader::new(File::open(path)?))
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer(writer, &ModelFile::from_model(self)?)?;
        Ok(())
    }

    pub fn read_json<R: Read>(reader: R) -> Result<Self> {
        let file: ModelFile = serde_json::from_reader(reader)?;
        file.into_model()
    }
}

fn tree_layout(kind: EstimatorKind) -> (TreeKind, SplitRule) {
    match kind {
        EstimatorKind::TreeKd => (TreeKind::Kd, SplitRule::Median),
        EstimatorKind::TreeMidpoint => (TreeKind::Kd, SplitRule::SlidingMidpoint),
        _ => (TreeKind::Ball, SplitRule::Median),
    }
}

impl DensityEstimator for Model {
    fn dim(&self) -> usize {
        match self {
            Model::Exact(m) => m.dim(),
            Model::Tree { kde, .. } => kde.dim(),
            Model::DensityMatrix { model, .. } => model.map().dim(),
        }
    }

    fn estimate(&self, x: &[f64]) -> Result<f64> {
        match self {
            Model::Exact(m) => m.estimate(x),
            Model::Tree { kde, .. } => kde.estimate(x),
            Model::DensityMatrix {
                model,
                low_rank: false,
            } => model.estimate(x),
            Model::DensityMatrix {
                model,
                low_rank: true,
            } => model.estimate_low_rank(x),
        }
    }

    fn estimate_batch(&self, queries: &PointSet) -> Result<Vec<f64>> {
        match self {
            Model::Exact(m) => m.estimate_batch(queries),
            Model::Tree { kde, .. } => kde.estimate_batch(queries),
            Model::DensityMatrix {
                model,
                low_rank: false,
            } => model.estimate_batch(queries),
            Model::DensityMatrix {
                model,
                low_rank: true,
            } => model.estimate_low_rank_batch(queries),
        }
    }
}

/// On-disk JSON layout. Floats are written in shortest round-trip form and
/// parsed exactly, so a loaded model reproduces its estimates bit for bit.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum ModelFile {
    #[serde(alias = "naive")]
    Raw {
        format_version: u32,
        d: usize,
        gamma: f64,
        n_train: usize,
        strategy: ExactStrategy,
        train: Vec<f64>,
    },
    Tree {
        format_version: u32,
        estimator: EstimatorKind,
        d: usize,
        gamma: f64,
        n_train: usize,
        leaf_size: usize,
        atol: f64,
        rtol: f64,
        train: Vec<f64>,
    },
    Dmkde {
        format_version: u32,
        d: usize,
        #[serde(rename = "D")]
        features: usize,
        gamma: f64,
        seed: u64,
        n_train: usize,
        #[serde(rename = "W")]
        weights: Vec<f64>,
        b: Vec<f64>,
        low_rank: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rho: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lambda: Option<Vec<f64>>,
        #[serde(default, rename = "V", skip_serializing_if = "Option::is_none")]
        vectors: Option<Vec<f64>>,
    },
}

impl ModelFile {
    fn from_model(model: &Model) -> Result<Self> {
        Ok(match model {
            Model::Exact(m) => ModelFile::Raw {
                format_version: MODEL_FORMAT_VERSION,
                d: m.bandwidth().dim(),
                gamma: m.bandwidth().gamma(),
                n_train: m.len(),
                strategy: m.strategy(),
                train: m.train().as_slice().to_vec(),
            },
            Model::Tree { kind, kde } => {
                let tree = kde.tree();
                ModelFile::Tree {
                    format_version: MODEL_FORMAT_VERSION,
                    estimator: *kind,
                    d: tree.bandwidth().dim(),
                    gamma: tree.bandwidth().gamma(),
                    n_train: tree.len(),
                    leaf_size: tree.leaf_size(),
                    atol: kde.atol(),
                    rtol: kde.rtol(),
                    train: tree.training_points().as_slice().to_vec(),
                }
            }
            Model::DensityMatrix { model, low_rank } => {
                let map = model.map();
                let (rho, lambda, vectors) = if *low_rank {
                    let f = model.factor().ok_or_else(|| {
                        Error::State("low-rank model without factorization".into())
                    })?;
                    (None, Some(f.values.clone()), Some(f.vectors.clone()))
                } else {
                    (Some(model.rho()?.to_vec()), None, None)
                };
                ModelFile::Dmkde {
                    format_version: MODEL_FORMAT_VERSION,
                    d: map.dim(),
                    features: map.features(),
                    gamma: map.gamma(),
                    seed: map.seed(),
                    n_train: model.n_train(),
                    weights: map.weights().to_vec(),
                    b: map.phases().to_vec(),
                    low_rank: *low_rank,
                    rho,
                    lambda,
                    vectors,
                }
            }
        })
    }

    fn into_model(self) -> Result<Model> {
        let version = match &self {
            ModelFile::Raw { format_version, .. }
            | ModelFile::Tree { format_version, .. }
            | ModelFile::Dmkde { format_version, .. } => *format_version,
        };
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported model format version {version} (expected {MODEL_FORMAT_VERSION})"
            )));
        }
        match self {
            ModelFile::Raw {
                d,
                gamma,
                n_train,
                strategy,
                train,
                ..
            } => {
                let train = checked_points(d, train, n_train)?;
                Ok(Model::Exact(ExactKde::fit_with_strategy(
                    train,
                    Bandwidth::new(gamma, d)?,
                    strategy,
                )?))
            }
            ModelFile::Tree {
                estimator,
                d,
                gamma,
                n_train,
                leaf_size,
                atol,
                rtol,
                train,
                ..
            } => {
                if !estimator.is_tree() {
                    return Err(Error::Data(format!("{estimator} is not a tree estimator")));
                }
                let train = checked_points(d, train, n_train)?;
                let (kind, split) = tree_layout(estimator);
                let tree =
                    SpatialTree::build(&train, kind, split, leaf_size, Bandwidth::new(gamma, d)?)?;
                Ok(Model::Tree {
                    kind: estimator,
                    kde: TreeKde::new(tree, atol, rtol)?,
                })
            }
            ModelFile::Dmkde {
                d,
                features,
                gamma,
                seed,
                n_train,
                weights,
                b,
                low_rank,
                rho,
                lambda,
                vectors,
                ..
            } => {
                if b.len() != features {
                    return Err(Error::Data(format!(
                        "expected {features} phases, found {}",
                        b.len()
                    )));
                }
                let map = RffMap::from_parts(d, weights, b, gamma, seed)?;
                let factor = match (lambda, vectors) {
                    (Some(values), Some(vectors)) => Some(LowRankFactor { values, vectors }),
                    (None, None) => None,
                    _ => return Err(Error::Data("factorization needs both lambda and V".into())),
                };
                if low_rank && factor.is_none() {
                    return Err(Error::Data("low-rank model file lacks lambda/V".into()));
                }
                let model = DensityMatrixModel::from_parts(map, n_train, rho, factor)?;
                Ok(Model::DensityMatrix { model, low_rank })
            }
        }
    }
}

fn checked_points(d: usize, data: Vec<f64>, n: usize) -> Result<PointSet> {
    let p = PointSet::new(d, data)?;
    if p.len() != n {
        return Err(Error::Data(format!(
            "model declares {n} training points but stores {}",
            p.len()
        )));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, d: usize, seed: u64) -> PointSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointSet::new(d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn kind_names() {
        for k in EstimatorKind::ALL {
            assert_eq!(k.as_str().parse::<EstimatorKind>().unwrap(), k);
        }
        assert!("quantum".parse::<EstimatorKind>().is_err());
    }

    #[test]
    fn every_kind_round_trips_through_json() {
        let train = random_points(300, 2, 1);
        let q = random_points(100, 2, 2);
        for kind in EstimatorKind::ALL {
            let m = Model::fit(&EstimatorConfig::new(kind), &train, 1.5, 64, 9).unwrap();
            assert_eq!(m.kind(), kind);
            let mut buf = Vec::new();
            m.write_json(&mut buf).unwrap();
            let back = Model::read_json(buf.as_slice()).unwrap();
            assert_eq!(back.kind(), kind);
            let a = m.estimate_batch(&q).unwrap();
            let b = back.estimate_batch(&q).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-15 * x.abs().max(1e-300), "{kind}");
            }
        }
    }

    #[test]
    fn rejects_future_versions_and_bad_gamma() {
        let m = Model::fit(
            &EstimatorConfig::new(EstimatorKind::Raw),
            &random_points(5, 2, 3),
            1.0,
            1,
            0,
        )
        .unwrap();
        let mut buf = Vec::new();
        m.write_json(&mut buf).unwrap();
        let text = String::from_utf8(buf)
            .unwrap()
            .replace("\"format_version\":1", "\"format_version\":99");
        assert!(Model::read_json(text.as_bytes()).is_err());
        assert!(Model::fit(
            &EstimatorConfig::new(EstimatorKind::Raw),
            &random_points(5, 2, 3),
            0.0,
            1,
            0
        )
        .is_err());
    }
}
