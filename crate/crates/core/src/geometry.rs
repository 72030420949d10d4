//! Point clouds, exact k-nearest-neighbor graphs, local-PCA curvature and
//! curvature-aware midpoint densification.

use std::collections::HashSet;

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::{Result, SagsError};

pub type Point3 = [f32; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    /// Bounding box of a non-empty point set.
    pub fn of(points: &[Point3]) -> Option<Self> {
        let first = *points.first()?;
        let mut min = first;
        let mut max = first;
        for p in points {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        Some(Self { min, max })
    }

    pub fn extent(&self) -> [f32; 3] {
        [self.max[0] - self.min[0], self.max[1] - self.min[1], self.max[2] - self.min[2]]
    }

    pub fn diagonal(&self) -> f32 {
        let e = self.extent();
        (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()
    }

    /// Grows every side by `fraction` of the largest extent (at least `1e-3`).
    pub fn padded(&self, fraction: f32) -> Self {
        let e = self.extent();
        let pad = (e[0].max(e[1]).max(e[2]) * fraction).max(1e-3);
        Self {
            min: [self.min[0] - pad, self.min[1] - pad, self.min[2] - pad],
            max: [self.max[0] + pad, self.max[1] + pad, self.max[2] + pad],
        }
    }
}

/// Sparse input points with optional per-point colors and curvature.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    positions: Vec<Point3>,
    colors: Option<Vec<[f32; 3]>>,
    curvature: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Point3>) -> Result<Self> {
        if positions.is_empty() {
            return Err(SagsError::Argument("point cloud needs at least one point".into()));
        }
        if let Some(i) = positions.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(SagsError::Argument(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            positions,
            colors: None,
            curvature: None,
        })
    }

    pub fn with_colors(mut self, colors: Vec<[f32; 3]>) -> Result<Self> {
        if colors.len() != self.positions.len() {
            return Err(SagsError::Argument(format!(
                "{} colors for {} points",
                colors.len(),
                self.positions.len()
            )));
        }
        if colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(SagsError::Argument("colors must lie in [0, 1]".into()));
        }
        self.colors = Some(colors);
        Ok(self)
    }

    pub fn with_curvature(mut self, curvature: Vec<f32>) -> Result<Self> {
        if curvature.len() != self.positions.len() {
            return Err(SagsError::Argument(format!(
                "{} curvature values for {} points",
                curvature.len(),
                self.positions.len()
            )));
        }
        if curvature.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(SagsError::Argument("curvature must lie in [0, 1]".into()));
        }
        self.curvature = Some(curvature);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point3] {
        &self.positions
    }

    pub fn colors(&self) -> Option<&[[f32; 3]]> {
        self.colors.as_deref()
    }

    pub fn curvature(&self) -> Option<&[f32]> {
        self.curvature.as_deref()
    }

    pub fn aabb(&self) -> Aabb {
        Aabb::of(&self.positions).expect("non-empty")
    }
}

/// Fixed-k neighbor table, rows sorted by ascending distance.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnGraph {
    k: usize,
    indices: Vec<u32>,
    distances: Vec<f32>,
}

impl KnnGraph {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn distances(&self, i: usize) -> &[f32] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }

    /// Flat `N*k` neighbor indices.
    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn all_distances(&self) -> &[f32] {
        &self.distances
    }

    pub fn mean_distance(&self, i: usize) -> f32 {
        self.distances(i).iter().sum::<f32>() / self.k as f32
    }
}

fn dist2(a: &Point3, b: &Point3) -> f64 {
    (0..3).map(|c| (a[c] as f64 - b[c] as f64).powi(2)).sum()
}

/// Keeps the `k` smallest `(d2, index)` candidates in ascending order.
struct Best {
    k: usize,
    items: Vec<(f64, u32)>,
}

impl Best {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn offer(&mut self, d2: f64, j: u32) {
        if self.items.len() == self.k {
            let worst = self.items[self.k - 1];
            if (d2, j) >= worst {
                return;
            }
        }
        let pos = self.items.partition_point(|&e| e < (d2, j));
        self.items.insert(pos, (d2, j));
        self.items.truncate(self.k);
    }

    fn full(&self) -> bool {
        self.items.len() == self.k
    }

    fn worst(&self) -> f64 {
        self.items.last().map_or(f64::INFINITY, |e| e.0)
    }
}

const BRUTE_FORCE_LIMIT: usize = 64;

struct Grid {
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<u32>,
}

impl Grid {
    fn build(points: &[Point3]) -> Self {
        let aabb = Aabb::of(points).expect("non-empty");
        let ext = aabb.extent().map(|e| e as f64);
        let largest = ext.iter().cloned().fold(0.0, f64::max).max(1e-12);
        let active: Vec<f64> = ext.iter().cloned().filter(|&e| e > largest * 1e-6).collect();
        let volume: f64 = active.iter().product();
        let target = (points.len() as f64 / 2.0).max(1.0);
        let mut cell = (volume / target).powf(1.0 / active.len().max(1) as f64).max(largest * 1e-3);
        let cells_for = |cell: f64| ext.map(|e| (e / cell).floor() as usize + 1);
        let mut dims = cells_for(cell);
        while dims.iter().product::<usize>() > 8 * points.len() + 8 {
            cell *= 1.5;
            dims = cells_for(cell);
        }
        let origin = aabb.min.map(|v| v as f64);
        let mut grid = Self {
            origin,
            cell,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let ncells = dims[0] * dims[1] * dims[2];
        let ids: Vec<usize> = points.iter().map(|p| grid.flat(grid.coords(p))).collect();
        let mut counts = vec![0usize; ncells + 1];
        for &c in &ids {
            counts[c + 1] += 1;
        }
        for c in 0..ncells {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut order = vec![0u32; points.len()];
        for (i, &c) in ids.iter().enumerate() {
            order[fill[c]] = i as u32;
            fill[c] += 1;
        }
        grid.starts = counts;
        grid.order = order;
        grid
    }

    fn coords(&self, p: &Point3) -> [usize; 3] {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let v = ((p[a] as f64 - self.origin[a]) / self.cell).floor();
            c[a] = (v.max(0.0) as usize).min(self.dims[a] - 1);
        }
        c
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    fn cell_points(&self, c: [usize; 3]) -> &[u32] {
        let f = self.flat(c);
        &self.order[self.starts[f]..self.starts[f + 1]]
    }

    fn query(&self, points: &[Point3], i: usize, k: usize) -> Best {
        let q = &points[i];
        let home = self.coords(q);
        let mut best = Best::new(k);
        let max_ring = self.dims.iter().max().copied().unwrap_or(1);
        for r in 0..=max_ring {
            let lo = home.map(|h| h.saturating_sub(r));
            let hi: Vec<usize> = (0..3).map(|a| (home[a] + r).min(self.dims[a] - 1)).collect();
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let cheb = x.abs_diff(home[0]).max(y.abs_diff(home[1])).max(z.abs_diff(home[2]));
                        if cheb != r {
                            continue;
                        }
                        for &j in self.cell_points([x, y, z]) {
                            if j as usize != i {
                                best.offer(dist2(q, &points[j as usize]), j);
                            }
                        }
                    }
                }
            }
            // Unvisited cells lie at least r cell widths away from the query.
            let reach = r as f64 * self.cell;
            if best.full() && best.worst() < reach * reach {
                break;
            }
        }
        best
    }
}

fn brute_force(points: &[Point3], i: usize, k: usize) -> Best {
    let mut best = Best::new(k);
    for (j, p) in points.iter().enumerate() {
        if j != i {
            best.offer(dist2(&points[i], p), j as u32);
        }
    }
    best
}

/// Exact Euclidean k-NN with lower-index tie breaking.
pub fn build_knn_graph(points: &[Point3], k: usize) -> Result<KnnGraph> {
    let n = points.len();
    if k == 0 || k >= n {
        return Err(SagsError::Argument(format!("k-NN needs 1 <= k < N, got k={k}, N={n}")));
    }
    let grid = (n > BRUTE_FORCE_LIMIT).then(|| Grid::build(points));
    let mut indices = Vec::with_capacity(n * k);
    let mut distances = Vec::with_capacity(n * k);
    for i in 0..n {
        let best = match &grid {
            Some(g) => g.query(points, i, k),
            None => brute_force(points, i, k),
        };
        for (d2, j) in best.items {
            indices.push(j);
            distances.push(d2.sqrt() as f32);
        }
    }
    Ok(KnnGraph { k, indices, distances })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvatureEstimate {
    pub values: Vec<f32>,
    /// Points whose neighborhood collapsed to a single location.
    pub degenerate: Vec<bool>,
}

impl CurvatureEstimate {
    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|&&d| d).count()
    }
}

/// Surface variation `lambda_min / sum(lambda)` of each point's neighborhood
/// (the point and its `k` nearest neighbors).
pub fn estimate_curvature(points: &[Point3], k: usize) -> Result<CurvatureEstimate> {
    if k < 3 {
        return Err(SagsError::Argument(format!("curvature needs k >= 3, got {k}")));
    }
    let graph = build_knn_graph(points, k)?;
    let mut values = Vec::with_capacity(points.len());
    let mut degenerate = Vec::with_capacity(points.len());
    for i in 0..points.len() {
        let members: Vec<[f64; 3]> = std::iter::once(i)
            .chain(graph.neighbors(i).iter().map(|&j| j as usize))
            .map(|j| points[j].map(|v| v as f64))
            .collect();
        let m = members.len() as f64;
        let mut mean = [0.0f64; 3];
        for p in &members {
            for a in 0..3 {
                mean[a] += p[a] / m;
            }
        }
        let mut cov = Matrix3::<f64>::zeros();
        for p in &members {
            let d = nalgebra::Vector3::new(p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]);
            cov += d * d.transpose();
        }
        cov /= m;
        let eig = SymmetricEigen::new(cov).eigenvalues;
        let total: f64 = eig.iter().map(|l| l.max(0.0)).sum();
        let scale = mean.iter().map(|v| v.abs()).fold(1.0, f64::max);
        if total <= 1e-24 * scale * scale {
            values.push(0.0);
            degenerate.push(true);
            continue;
        }
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min).max(0.0);
        values.push((min / total) as f32);
        degenerate.push(false);
    }
    let est = CurvatureEstimate { values, degenerate };
    if est.degenerate_count() > 0 {
        log::warn!("{} points have degenerate neighborhoods; curvature set to 0", est.degenerate_count());
    }
    Ok(est)
}

/// Selects the "low curvature" subset that receives midpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// The lowest `floor(q * N)` points by curvature, `q` in `[0, 1]`.
    Percentile(f64),
    /// Points with curvature strictly below the value.
    Absolute(f64),
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::Percentile(0.5)
    }
}

impl ThresholdPolicy {
    /// Mask of selected points.
    pub fn select(&self, curvature: &[f32]) -> Result<Vec<bool>> {
        let n = curvature.len();
        match *self {
            ThresholdPolicy::Percentile(q) => {
                if !(0.0..=1.0).contains(&q) {
                    return Err(SagsError::Argument(format!("percentile must lie in [0, 1], got {q}")));
                }
                let count = ((q * n as f64).floor() as usize).min(n);
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| curvature[a].total_cmp(&curvature[b]).then(a.cmp(&b)));
                let mut mask = vec![false; n];
                for &i in &order[..count] {
                    mask[i] = true;
                }
                Ok(mask)
            }
            ThresholdPolicy::Absolute(t) => Ok(curvature.iter().map(|&c| (c as f64) < t).collect()),
        }
    }
}

/// Keypoints followed by generated midpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct DensifiedCloud {
    pub points: Vec<Point3>,
    /// Keypoint parents `(i, j)` with `i < j`, one per midpoint.
    pub parents: Vec<(u32, u32)>,
    pub keypoints: usize,
}

impl DensifiedCloud {
    /// The input cloud without midpoints.
    pub fn identity(points: &[Point3]) -> Self {
        Self {
            points: points.to_vec(),
            parents: Vec::new(),
            keypoints: points.len(),
        }
    }

    pub fn midpoints(&self) -> &[Point3] {
        &self.points[self.keypoints..]
    }
}

pub fn midpoint(a: &Point3, b: &Point3) -> Point3 {
    [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]), 0.5 * (a[2] + b[2])]
}

/// Adds the midpoint between every selected low-curvature point and each of
/// its `k` nearest neighbors, deduplicated by unordered parent pair.
pub fn densify_curvature_aware(
    points: &[Point3],
    curvature: &[f32],
    policy: ThresholdPolicy,
    k: usize,
) -> Result<DensifiedCloud> {
    if curvature.len() != points.len() {
        return Err(SagsError::Argument(format!(
            "{} curvature values for {} points",
            curvature.len(),
            points.len()
        )));
    }
    let selected = policy.select(curvature)?;
    if !selected.iter().any(|&s| s) {
        log::warn!("no point below the curvature threshold; densification adds nothing");
        return Ok(DensifiedCloud::identity(points));
    }
    let graph = build_knn_graph(points, k)?;
    let mut seen = HashSet::new();
    let mut parents = Vec::new();
    for i in (0..points.len()).filter(|&i| selected[i]) {
        for &j in graph.neighbors(i) {
            let pair = ((i as u32).min(j), (i as u32).max(j));
            if seen.insert(pair) {
                parents.push(pair);
            }
        }
    }
    let mut out = points.to_vec();
    out.extend(parents.iter().map(|&(a, b)| midpoint(&points[a as usize], &points[b as usize])));
    Ok(DensifiedCloud {
        points: out,
        parents,
        keypoints: points.len(),
    })
}
