//! Geometric kernels shared by every other module: squared distances,
//! brute-force k-nearest neighbours, farthest point sampling and inverse
//! distance weighted feature interpolation.
//!
//! Everything here is a pure function of its inputs. Ties are always broken
//! in favour of the lowest index so that results are reproducible bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Squared distances below this are treated as coincident by
/// [`idw_interpolate`].
pub const COINCIDENCE_EPS: f64 = 1e-10;

/// Default neighbour count for feature interpolation.
pub const IDW_K: usize = 3;
/// Default inverse-distance exponent for feature interpolation.
pub const IDW_POWER: f64 = 2.0;

/// An ordered, non-empty set of finite 3D points.
///
/// Point order is significant: index `i` identifies the same material point
/// across the frames of a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point>", into = "Vec<Point>")]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidCloud("a point cloud needs at least one point".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidCloud(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Point {
        self.points[i]
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    /// Row-major `[N × 3]` copy of the coordinates.
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(3) {
            return Err(Error::Shape(format!("{} values is not a multiple of 3", flat.len())));
        }
        Self::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.points[i]).collect())
    }

    pub fn translated(&self, v: Point) -> Self {
        Self {
            points: self.points.iter().map(|p| add(*p, v)).collect(),
        }
    }

    pub fn centroid(&self) -> Point {
        let n = self.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for d in 0..3 {
                c[d] += p[d];
            }
        }
        c.map(|x| x / n)
    }
}

impl TryFrom<Vec<Point>> for PointCloud {
    type Error = Error;

    fn try_from(points: Vec<Point>) -> Result<Self> {
        Self::new(points)
    }
}

impl From<PointCloud> for Vec<Point> {
    fn from(pc: PointCloud) -> Self {
        pc.points
    }
}

#[inline]
pub fn sq_dist(a: Point, b: Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Dense `|a| × |b|` matrix of squared distances, row-major.
pub fn pairwise_sq_dist(a: &PointCloud, b: &PointCloud) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for &p in a.points() {
        out.extend(b.points().iter().map(|&q| sq_dist(p, q)));
    }
    out
}

/// The `k` nearest reference points of every query point.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    k: usize,
    indices: Vec<usize>,
    sq_dists: Vec<f64>,
}

impl NeighborIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_queries(&self) -> usize {
        self.indices.len().checked_div(self.k).unwrap_or(0)
    }

    /// Reference indices for query `q`, nearest first.
    pub fn neighbors(&self, q: usize) -> &[usize] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }

    pub fn distances(&self, q: usize) -> &[f64] {
        &self.sq_dists[q * self.k..(q + 1) * self.k]
    }

    /// All indices, query-major.
    pub fn flat_indices(&self) -> &[usize] {
        &self.indices
    }
}

#[inline]
fn by_dist_then_index(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Below this `k`, neighbours are kept in a sorted insertion buffer.
const SMALL_K: usize = 32;

/// Brute-force k-nearest neighbours, ascending by squared distance with ties
/// resolved towards the lower reference index.
pub fn knn(query: &PointCloud, reference: &PointCloud, k: usize) -> Result<NeighborIndex> {
    if k > reference.len() {
        return Err(Error::TooFewPoints {
            k,
            available: reference.len(),
        });
    }
    let mut indices = Vec::with_capacity(query.len() * k);
    let mut sq_dists = Vec::with_capacity(query.len() * k);
    if k == 0 {
        return Ok(NeighborIndex { k, indices, sq_dists });
    }
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(reference.len());
    for &q in query.points() {
        scratch.clear();
        if k <= SMALL_K {
            // sorted insertion; references arrive in index order, so an
            // equal distance never displaces an earlier entry
            let mut worst = f64::INFINITY;
            for (j, &r) in reference.points().iter().enumerate() {
                let d = sq_dist(q, r);
                if d >= worst {
                    continue;
                }
                if scratch.len() == k {
                    scratch.pop();
                }
                let at = scratch.partition_point(|e| e.0 <= d);
                scratch.insert(at, (d, j));
                if scratch.len() == k {
                    worst = scratch[k - 1].0;
                }
            }
        } else {
            scratch.extend(reference.points().iter().enumerate().map(|(j, &r)| (sq_dist(q, r), j)));
            if k < scratch.len() {
                scratch.select_nth_unstable_by(k - 1, by_dist_then_index);
            }
            scratch.truncate(k);
            scratch.sort_unstable_by(by_dist_then_index);
        }
        for &(d, j) in &scratch {
            indices.push(j);
            sq_dists.push(d);
        }
    }
    Ok(NeighborIndex { k, indices, sq_dists })
}

/// Greedy farthest point sampling starting from `seed_index`.
///
/// Each subsequent pick maximises the minimum squared distance to the points
/// already chosen; ties go to the lowest index.
pub fn farthest_point_sample(pc: &PointCloud, m: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = pc.len();
    if m > n {
        return Err(Error::TooFewPoints { k: m, available: n });
    }
    if seed_index >= n {
        return Err(Error::Config(format!("seed index {seed_index} out of range for {n} points")));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let pts = pc.points();
    let mut selected = Vec::with_capacity(m);
    let mut chosen = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = seed_index;
    loop {
        selected.push(current);
        chosen[current] = true;
        if selected.len() == m {
            break;
        }
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if chosen[i] {
                continue;
            }
            let d = sq_dist(pts[i], c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

/// Precomputed interpolation stencil: for each destination point, `k`
/// source indices and normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpWeights {
    pub k: usize,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl InterpWeights {
    pub fn num_dst(&self) -> usize {
        self.indices.len().checked_div(self.k).unwrap_or(0)
    }

    /// Apply the stencil to `width`-wide row-major source features.
    pub fn apply(&self, src_feats: &[f64], width: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_dst() * width];
        for (q, row) in out.chunks_exact_mut(width.max(1)).enumerate().take(self.num_dst()) {
            for s in 0..self.k {
                let j = self.indices[q * self.k + s];
                let w = self.weights[q * self.k + s];
                if w == 0.0 {
                    continue;
                }
                let src = &src_feats[j * width..(j + 1) * width];
                for (o, &x) in row.iter_mut().zip(src) {
                    *o += w * x;
                }
            }
        }
        out
    }
}

/// Inverse-distance weights from the `k` nearest sources of each destination.
///
/// A destination within [`COINCIDENCE_EPS`] (squared) of a source puts all of
/// its weight on the nearest such source.
pub fn idw_weights(src: &PointCloud, dst: &PointCloud, k: usize, power: f64) -> Result<InterpWeights> {
    let nn = knn(dst, src, k)?;
    let mut weights = Vec::with_capacity(dst.len() * k);
    for q in 0..dst.len() {
        let d2 = nn.distances(q);
        if d2.first().is_some_and(|&d| d < COINCIDENCE_EPS) {
            weights.push(1.0);
            weights.extend(std::iter::repeat_n(0.0, k - 1));
            continue;
        }
        let raw: Vec<f64> = d2.iter().map(|&d| d.powf(-power / 2.0)).collect();
        let total: f64 = raw.iter().sum();
        weights.extend(raw.iter().map(|w| w / total));
    }
    Ok(InterpWeights {
        k,
        indices: nn.indices,
        weights,
    })
}

/// Interpolate `width`-wide source feature rows onto `dst`.
pub fn idw_interpolate(
    src_coords: &PointCloud,
    src_feats: &[f64],
    width: usize,
    dst_coords: &PointCloud,
    k: usize,
    power: f64,
) -> Result<Vec<f64>> {
    if src_feats.len() != src_coords.len() * width {
        return Err(Error::Shape(format!(
            "{} feature values for {} sources of width {width}",
            src_feats.len(),
            src_coords.len()
        )));
    }
    Ok(idw_weights(src_coords, dst_coords, k, power)?.apply(src_feats, width))
}
