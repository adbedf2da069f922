//! Space-partitioning KDE: kd-trees (nested boxes) and ball trees (nested
//! hyperspheres) traversed with kernel bounds.
//!
//! A node whose kernel values are bracketed tightly enough is replaced by
//! `count * (kmin + kmax) / 2`. The pruning test
//! `count * (kmax - kmin) / 2 <= count * (atol + rtol * lower / n)`, with
//! `lower` the running global lower bound of the kernel sum, guarantees
//! `|S - S_exact| <= n * atol + rtol * S_exact` for the unnormalized sum `S`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernels::{sq_dist, Bandwidth};
use crate::points::PointSet;

pub const DEFAULT_LEAF_SIZE: usize = 40;
pub const DEFAULT_ATOL: f64 = 0.0;
pub const DEFAULT_RTOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TreeKind {
    Kd,
    Ball,
}

/// Where a node's points are divided along the chosen axis.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitRule {
    /// At the median coordinate; children differ in size by at most one.
    #[default]
    Median,
    /// At the midpoint of the node's cell, slid onto the nearest point when
    /// one side would be empty.
    SlidingMidpoint,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

impl Geometry {
    /// Squared minimum and maximum distance from `x` to the region.
    pub fn sq_distance_range(&self, x: &[f64]) -> (f64, f64) {
        match self {
            Geometry::Box { lo, hi } => {
                let mut near = 0.0;
                let mut far = 0.0;
                for ((&l, &h), &v) in lo.iter().zip(hi).zip(x) {
                    let below = l - v;
                    let above = v - h;
                    let gap = below.max(above).max(0.0);
                    near += gap * gap;
                    let reach = (v - l).abs().max((h - v).abs());
                    far += reach * reach;
                }
                (near, far)
            }
            Geometry::Ball { center, radius } => {
                let delta = sq_dist(center, x).sqrt();
                let near = (delta - radius).max(0.0);
                let far = delta + radius;
                (near * near, far * far)
            }
        }
    }

    pub fn contains(&self, x: &[f64], slack: f64) -> bool {
        match self {
            Geometry::Box { lo, hi } => lo
                .iter()
                .zip(hi)
                .zip(x)
                .all(|((&l, &h), &v)| v >= l - slack && v <= h + slack),
            Geometry::Ball { center, radius } => sq_dist(center, x).sqrt() <= radius + slack,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    /// Range of this node's points in the tree's permuted point order.
    pub start: usize,
    pub end: usize,
    pub children: Option<(usize, usize)>,
    pub geometry: Geometry,
}

impl TreeNode {
    #[inline]
    pub fn count(&self) -> usize {
        self.end - self.start
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// Bounds `kmin <= exp(-gamma |x - x_i|^2) <= kmax` over every point in `node`.
pub fn node_kernel_bounds(node: &TreeNode, x: &[f64], bw: &Bandwidth) -> (f64, f64) {
    let (near, far) = node.geometry.sq_distance_range(x);
    ((-bw.gamma() * far).exp(), (-bw.gamma() * near).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialTree {
    kind: TreeKind,
    split: SplitRule,
    leaf_size: usize,
    bw: Bandwidth,
    /// Training points reordered so every node owns a contiguous range.
    points: PointSet,
    /// `order[k]` is the original row index of permuted point `k`.
    order: Vec<usize>,
    nodes: Vec<TreeNode>,
}

/// Work done by one traversal.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TraversalStats {
    pub kernel_evals: usize,
    pub nodes_visited: usize,
    pub nodes_pruned: usize,
}

impl SpatialTree {
    pub fn build_kd(points: &PointSet, leaf_size: usize, bw: Bandwidth) -> Result<Self> {
        Self::build(points, TreeKind::Kd, SplitRule::Median, leaf_size, bw)
    }

    pub fn build_ball(points: &PointSet, leaf_size: usize, bw: Bandwidth) -> Result<Self> {
        Self::build(points, TreeKind::Ball, SplitRule::Median, leaf_size, bw)
    }

    pub fn build(
        points: &PointSet,
        kind: TreeKind,
        split: SplitRule,
        leaf_size: usize,
        bw: Bandwidth,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Domain("cannot build a tree over zero points".into()));
        }
        if leaf_size == 0 {
            return Err(Error::Domain("leaf size must be at least 1".into()));
        }
        check_dim(bw.dim(), points.dim())?;
        points.check_finite()?;

        let mut builder = Builder {
            points,
            kind,
            split,
            leaf_size,
            order: (0..points.len()).collect(),
            nodes: Vec::with_capacity(2 * points.len() / leaf_size + 1),
        };
        let (lo, hi) = points.bounds();
        builder.build_node(0, points.len(), lo, hi);
        let Builder { order, nodes, .. } = builder;
        Ok(Self {
            kind,
            split,
            leaf_size,
            bw,
            points: points.select(&order),
            order,
            nodes,
        })
    }

    pub fn kind(&self) -> TreeKind {
        self.kind
    }

    pub fn split_rule(&self) -> SplitRule {
        self.split
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    pub fn bandwidth(&self) -> &Bandwidth {
        &self.bw
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    /// Points in tree order.
    pub fn points(&self) -> &PointSet {
        &self.points
    }

    /// Original row indices in tree order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Training points in their original order.
    pub fn training_points(&self) -> PointSet {
        let mut inverse = vec![0; self.order.len()];
        for (k, &i) in self.order.iter().enumerate() {
            inverse[i] = k;
        }
        self.points.select(&inverse)
    }

    /// Number of levels below the root (a single-leaf tree has depth 0).
    pub fn depth(&self) -> usize {
        fn go(nodes: &[TreeNode], id: usize) -> usize {
            match nodes[id].children {
                Some((l, r)) => 1 + go(nodes, l).max(go(nodes, r)),
                None => 0,
            }
        }
        go(&self.nodes, 0)
    }

    pub fn node_points(&self, node: &TreeNode) -> impl Iterator<Item = &[f64]> + '_ {
        let dim = self.points.dim();
        self.points.as_slice()[node.start * dim..node.end * dim].chunks_exact(dim)
    }

    /// Approximate normalized density at `x`; see the module docs for the guarantee.
    pub fn estimate(&self, x: &[f64], atol: f64, rtol: f64) -> Result<f64> {
        Ok(self.estimate_with_stats(x, atol, rtol)?.0)
    }

    pub fn estimate_with_stats(
        &self,
        x: &[f64],
        atol: f64,
        rtol: f64,
    ) -> Result<(f64, TraversalStats)> {
        check_dim(self.bw.dim(), x.len())?;
        if !(atol >= 0.0 && rtol >= 0.0) {
            return Err(Error::Domain(format!(
                "tolerances must be non-negative, got atol={atol} rtol={rtol}"
            )));
        }
        let (sum, stats) = self.kernel_sum(x, atol, rtol);
        Ok((sum * self.scale(), stats))
    }

    fn scale(&self) -> f64 {
        1.0 / (self.len() as f64 * self.bw.kde_normalizer())
    }

    /// Approximate unnormalized kernel sum with traversal statistics.
    pub fn kernel_sum(&self, x: &[f64], atol: f64, rtol: f64) -> (f64, TraversalStats) {
        let n = self.len() as f64;
        let gamma = self.bw.gamma();
        let mut stats = TraversalStats::default();
        let (kmin, kmax) = node_kernel_bounds(&self.nodes[0], x, &self.bw);
        let mut lower = n * kmin;
        let mut total = 0.0;
        let mut stack = vec![(0usize, kmin, kmax)];
        while let Some((id, kmin, kmax)) = stack.pop() {
            let node = &self.nodes[id];
            stats.nodes_visited += 1;
            let count = node.count() as f64;
            if count * (kmax - kmin) * 0.5 <= count * (atol + rtol * lower / n) {
                stats.nodes_pruned += 1;
                total += count * 0.5 * (kmin + kmax);
                continue;
            }
            lower -= count * kmin;
            match node.children {
                None => {
                    let s: f64 = self
                        .node_points(node)
                        .map(|p| (-gamma * sq_dist(p, x)).exp())
                        .sum();
                    stats.kernel_evals += node.count();
                    total += s;
                    lower += s;
                }
                Some((l, r)) => {
                    let (lmin, lmax) = node_kernel_bounds(&self.nodes[l], x, &self.bw);
                    let (rmin, rmax) = node_kernel_bounds(&self.nodes[r], x, &self.bw);
                    lower +=
                        self.nodes[l].count() as f64 * lmin + self.nodes[r].count() as f64 * rmin;
                    // Closer child on top of the stack.
                    if lmax >= rmax {
                        stack.push((r, rmin, rmax));
                        stack.push((l, lmin, lmax));
                    } else {
                        stack.push((l, lmin, lmax));
                        stack.push((r, rmin, rmax));
                    }
                }
            }
        }
        (total, stats)
    }
}

struct Builder<'a> {
    points: &'a PointSet,
    kind: TreeKind,
    split: SplitRule,
    leaf_size: usize,
    order: Vec<usize>,
    nodes: Vec<TreeNode>,
}

impl Builder<'_> {
    /// `cell_lo`/`cell_hi` is the region assigned by the parent split; only
    /// the sliding-midpoint rule looks at it.
    fn build_node(
        &mut self,
        start: usize,
        end: usize,
        cell_lo: Vec<f64>,
        cell_hi: Vec<f64>,
    ) -> usize {
        let dim = self.points.dim();
        let idx = &self.order[start..end];
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for &i in idx {
            for (k, &v) in self.points.row(i).iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        let geometry = match self.kind {
            TreeKind::Kd => Geometry::Box {
                lo: lo.clone(),
                hi: hi.clone(),
            },
            TreeKind::Ball => {
                let mut center = vec![0.0; dim];
                for &i in idx {
                    for (c, &v) in center.iter_mut().zip(self.points.row(i)) {
                        *c += v;
                    }
                }
                let inv = 1.0 / idx.len() as f64;
                center.iter_mut().for_each(|c| *c *= inv);
                let radius = idx
                    .iter()
                    .map(|&i| sq_dist(&center, self.points.row(i)))
                    .fold(0.0f64, f64::max)
                    .sqrt();
                Geometry::Ball { center, radius }
            }
        };

        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            start,
            end,
            children: None,
            geometry,
        });

        // Widest spread; lowest index wins ties.
        let mut axis = 0;
        let mut spread = hi[0] - lo[0];
        for k in 1..dim {
            if hi[k] - lo[k] > spread {
                spread = hi[k] - lo[k];
                axis = k;
            }
        }
        if end - start <= self.leaf_size || spread <= 0.0 {
            return id;
        }

        let (mid, split_value) = match self.split {
            SplitRule::Median => {
                let mid = start + (end - start) / 2;
                let pts = self.points;
                self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
                    pts.row(a)[axis].total_cmp(&pts.row(b)[axis])
                });
                (mid, pts.row(self.order[mid])[axis])
            }
            SplitRule::SlidingMidpoint => {
                let mut value = 0.5 * (cell_lo[axis] + cell_hi[axis]);
                if value <= lo[axis] {
                    // Everything right of the midpoint: keep the minimum on the left.
                    value = lo[axis];
                    let mid = self.partition(start, end, axis, |v| v <= value);
                    (mid, value)
                } else if value > hi[axis] {
                    value = hi[axis];
                    let mid = self.partition(start, end, axis, |v| v < value);
                    (mid, value)
                } else {
                    let mid = self.partition(start, end, axis, |v| v < value);
                    (mid, value)
                }
            }
        };

        let mut left_hi = cell_hi.clone();
        left_hi[axis] = split_value;
        let mut right_lo = cell_lo.clone();
        right_lo[axis] = split_value;
        let left = self.build_node(start, mid, cell_lo, left_hi);
        let right = self.build_node(mid, end, right_lo, cell_hi);
        self.nodes[id].children = Some((left, right));
        id
    }

    /// Moves points satisfying `goes_left` to the front of the range; returns the boundary.
    fn partition(
        &mut self,
        start: usize,
        end: usize,
        axis: usize,
        goes_left: impl Fn(f64) -> bool,
    ) -> usize {
        let pts = self.points;
        let mut boundary = start;
        for k in start..end {
            if goes_left(pts.row(self.order[k])[axis]) {
                self.order.swap(boundary, k);
                boundary += 1;
            }
        }
        boundary
    }
}

/// A tree-backed KDE with fixed traversal tolerances.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeKde {
    tree: SpatialTree,
    atol: f64,
    rtol: f64,
}

impl TreeKde {
    pub fn new(tree: SpatialTree, atol: f64, rtol: f64) -> Result<Self> {
        if !(atol >= 0.0 && rtol >= 0.0) {
            return Err(Error::Domain(format!(
                "tolerances must be non-negative, got atol={atol} rtol={rtol}"
            )));
        }
        Ok(Self { tree, atol, rtol })
    }

    pub fn tree(&self) -> &SpatialTree {
        &self.tree
    }

    pub fn atol(&self) -> f64 {
        self.atol
    }

    pub fn rtol(&self) -> f64 {
        self.rtol
    }

    pub fn estimate(&self, x: &[f64]) -> Result<f64> {
        self.tree.estimate(x, self.atol, self.rtol)
    }

    pub fn estimate_batch(&self, queries: &PointSet) -> Result<Vec<f64>> {
        check_dim(self.tree.bw.dim(), queries.dim())?;
        let scale = self.tree.scale();
        Ok(queries
            .as_slice()
            .par_chunks_exact(queries.dim())
            .map(|x| self.tree.kernel_sum(x, self.atol, self.rtol).0 * scale)
            .collect())
    }
}
