//! Point cloud distances: Chamfer distance, exact Earth Mover's Distance and
//! the worst-percentile Chamfer diagnostic.
//!
//! All distances are squared Euclidean and normalized per point:
//!
//! * `CD  = mean_a min_b |a−b|² + mean_b min_a |b−a|²`
//! * `EMD = mean_i |pred_i − target_π(i)|²` with `π` an optimal assignment
//!
//! The `*_on_tape` variants record the same quantity on a [`Tape`] so that it
//! can be differentiated with respect to the predicted coordinates. Nearest
//! neighbour choices and the assignment are held fixed in the reverse pass.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, sq_dist, PointCloud};

/// Nearest neighbour in `to` of every point of `from`, with squared
/// distances. Ties go to the lowest index; the flag reports whether any
/// exact tie occurred.
pub fn nearest_matches(from: &PointCloud, to: &PointCloud) -> (Vec<usize>, Vec<f64>, bool) {
    let mut idx = Vec::with_capacity(from.len());
    let mut dist = Vec::with_capacity(from.len());
    let mut tie = false;
    for &a in from.points() {
        let mut best = f64::INFINITY;
        let mut best_j = 0;
        for (j, &b) in to.points().iter().enumerate() {
            let d = sq_dist(a, b);
            if d < best {
                best = d;
                best_j = j;
            } else if d == best {
                tie = true;
            }
        }
        idx.push(best_j);
        dist.push(best);
    }
    (idx, dist, tie)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn chamfer_distance(pred: &PointCloud, target: &PointCloud) -> f64 {
    let (_, forward, _) = nearest_matches(pred, target);
    let (_, backward, _) = nearest_matches(target, pred);
    mean(&forward) + mean(&backward)
}

/// Minimum-cost perfect matching on a dense row-major `n × n` cost matrix.
/// Returns `assignment[row] = column`.
///
/// Shortest augmenting paths with row/column potentials, O(n³).
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n×n");
    // 1-based internally; column 0 is the virtual source
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut min_to = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        min_to.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            let base = (i0 - 1) * n;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[base + j - 1] - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Optimal assignment of predicted points to target points under squared
/// Euclidean cost.
pub fn emd_assignment(pred: &PointCloud, target: &PointCloud) -> Result<Vec<usize>> {
    if pred.len() != target.len() {
        return Err(Error::Cardinality(pred.len(), target.len()));
    }
    let n = pred.len();
    let mut cost = Vec::with_capacity(n * n);
    for &a in pred.points() {
        cost.extend(target.points().iter().map(|&b| sq_dist(a, b)));
    }
    Ok(hungarian(&cost, n))
}

pub fn emd(pred: &PointCloud, target: &PointCloud) -> Result<f64> {
    let perm = emd_assignment(pred, target)?;
    let total: f64 = perm.iter().enumerate().map(|(i, &j)| sq_dist(pred.point(i), target.point(j))).sum();
    Ok(total / pred.len() as f64)
}

/// Number of points in the worst `p` percent of `n`, at least one.
fn top_count(n: usize, p: f64) -> usize {
    // the small offset keeps exact products such as 5% of 20 from rounding up
    let c = (p * n as f64 / 100.0 - 1e-9).ceil() as usize;
    c.clamp(1, n)
}

/// Mean of the `ceil(p·N/100)` largest predicted-to-target nearest
/// neighbour squared distances.
pub fn cd_top_percent(pred: &PointCloud, target: &PointCloud, p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::Config(format!("percentile {p} is outside (0, 100]")));
    }
    let (_, mut d, _) = nearest_matches(pred, target);
    let c = top_count(d.len(), p);
    d.sort_unstable_by(|a, b| b.total_cmp(a));
    Ok(mean(&d[..c]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cd: f64,
    pub emd: f64,
    pub cd_top5: f64,
    /// Predicted-to-target nearest squared distances, in predicted order.
    pub per_point_nn_dist: Vec<f64>,
}

pub const CSV_HEADER: &str = "sequence_id,frame,cd,emd,cd_top5";

impl MetricReport {
    /// EMD is computed on at most `emd_cap` points per cloud; larger clouds
    /// are reduced to that size by farthest point sampling first.
    pub fn compute(pred: &PointCloud, target: &PointCloud, emd_cap: usize) -> Result<Self> {
        let (_, per_point, _) = nearest_matches(pred, target);
        let (_, backward, _) = nearest_matches(target, pred);
        let cd = mean(&per_point) + mean(&backward);
        let (p, t) = subsample_pair(pred, target, emd_cap)?;
        Ok(Self {
            cd,
            emd: emd(&p, &t)?,
            cd_top5: cd_top_percent(pred, target, 5.0)?,
            per_point_nn_dist: per_point,
        })
    }

    pub fn csv_row(&self, sequence_id: &str, frame: usize) -> String {
        format!("{sequence_id},{frame},{},{},{}", self.cd, self.emd, self.cd_top5)
    }
}

/// FPS-subsample both clouds to `cap` points when they exceed it.
pub fn subsample_pair(pred: &PointCloud, target: &PointCloud, cap: usize) -> Result<(PointCloud, PointCloud)> {
    if pred.len() <= cap && target.len() <= cap {
        return Ok((pred.clone(), target.clone()));
    }
    let ip = farthest_point_sample(pred, cap.min(pred.len()), 0)?;
    let it = farthest_point_sample(target, cap.min(target.len()), 0)?;
    Ok((pred.select(&ip)?, target.select(&it)?))
}

fn cloud_of(tape: &Tape, pred: Var) -> Result<PointCloud> {
    PointCloud::from_flat(tape.value(pred))
}

fn hash_indices(idx: &[usize]) -> u64 {
    idx.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &i| crate::diffcore::tape_mix(h, i as u64))
}

/// Chamfer distance recorded on `tape`; `pred` is an `[N × 3]` node.
pub fn chamfer_on_tape(tape: &mut Tape, pred: Var, target: &PointCloud) -> Result<Var> {
    let p = cloud_of(tape, pred)?;
    let (fwd, _, tie1) = nearest_matches(&p, target);
    let (bwd, _, tie2) = nearest_matches(target, &p);
    tape.note_decision(hash_indices(&fwd) ^ hash_indices(&bwd).rotate_left(17), tie1 || tie2);
    let wf = 1.0 / p.len() as f64;
    let wb = 1.0 / target.len() as f64;
    let mut terms: Vec<(usize, usize, f64)> = fwd.iter().enumerate().map(|(a, &b)| (a, b, wf)).collect();
    terms.extend(bwd.iter().enumerate().map(|(b, &a)| (a, b, wb)));
    tape.matched_sq_dist(pred, target.points(), terms)
}

/// Exact EMD recorded on `tape` with the optimal assignment held fixed.
pub fn emd_on_tape(tape: &mut Tape, pred: Var, target: &PointCloud) -> Result<Var> {
    let p = cloud_of(tape, pred)?;
    let perm = emd_assignment(&p, target)?;
    tape.note_decision(hash_indices(&perm), false);
    let w = 1.0 / p.len() as f64;
    let terms = perm.iter().enumerate().map(|(i, &j)| (i, j, w)).collect();
    tape.matched_sq_dist(pred, target.points(), terms)
}

/// EMD on tape, reducing both clouds to at most `cap` points by FPS first.
pub fn emd_on_tape_capped(tape: &mut Tape, pred: Var, target: &PointCloud, cap: usize) -> Result<Var> {
    if tape.dims(pred).0 <= cap && target.len() <= cap {
        return emd_on_tape(tape, pred, target);
    }
    let p = cloud_of(tape, pred)?;
    let ip = farthest_point_sample(&p, cap.min(p.len()), 0)?;
    let it = farthest_point_sample(target, cap.min(target.len()), 0)?;
    let sub = tape.gather_rows(pred, ip)?;
    emd_on_tape(tape, sub, &target.select(&it)?)
}
