//! Kernel density estimation at scale: exact Gaussian KDE, kd-tree and
//! ball-tree approximations with guaranteed error bounds, and the
//! density-matrix estimator built on random Fourier features. Also ships
//! the synthetic benchmark densities and the evaluation protocol used to
//! compare them.

pub mod dm;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod exact;
pub mod kernels;
pub mod linalg;
pub mod points;
pub mod rff;
pub mod seed;
pub mod synthetic;
pub mod tree;

pub use dm::{DensityMatrixModel, RankRule};
pub use error::{Error, Result};
pub use estimator::{DensityEstimator, EstimatorConfig, EstimatorKind, Model};
pub use eval::{EvalReport, ExperimentConfig};
pub use exact::{ExactKde, ExactStrategy};
pub use kernels::{gamma_from_sigma, gaussian_kernel, Bandwidth};
pub use points::PointSet;
pub use rff::RffMap;
pub use synthetic::{DatasetName, SyntheticSpec};
pub use tree::{SpatialTree, SplitRule, TreeKind};
