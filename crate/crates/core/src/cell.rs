//! The recurrent unit of the extraction phase.
//!
//! For every point the cell looks at two neighbourhoods: its `k` nearest
//! points in the current frame (spatial) and its `k` nearest points in the
//! state carried over from the previous frame (temporal). Each neighbour
//! becomes an edge vector
//!
//! ```text
//! [ x_j − x_i | in_i | spatial slot | temporal slot ]
//! ```
//!
//! where a spatial neighbour fills the spatial slot with its input features
//! and a temporal neighbour fills the temporal slot with its state features;
//! the other slot is zero. One shared edge MLP encodes every edge, the two
//! groups are max-pooled separately, and a per-point update layer maps
//! `[pool_spatial | pool_temporal | in_i]` to the new feature, which is also
//! the new state.
//!
//! Coordinates only ever enter through differences, so the cell is
//! invariant to translating the whole sequence.

use rand::Rng;

use crate::diffcore::{shared_mlp_forward, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{knn, sub, PointCloud};

/// Recurrent memory of one level.
#[derive(Debug, Clone, PartialEq)]
pub enum CellState {
    /// Nothing seen yet; the next step is treated as the first frame.
    Empty,
    Active { coords: PointCloud, feats: Var },
}

impl CellState {
    pub fn is_empty(&self) -> bool {
        matches!(self, CellState::Empty)
    }
}

#[derive(Debug, Clone)]
pub struct CellOutput {
    pub feats: Var,
    pub new_state: CellState,
}

pub fn reset_state(levels: usize) -> Vec<CellState> {
    vec![CellState::Empty; levels]
}

/// Width of one edge vector for a cell with the given widths.
pub fn edge_width(in_width: usize, out_width: usize) -> usize {
    3 + 2 * in_width + out_width
}

/// Create the edge and update layers of one cell under `prefix`.
pub fn init_cell_params(store: &mut ParamStore, prefix: &str, in_width: usize, out_width: usize, rng: &mut impl Rng) {
    store.init_linear(&format!("{prefix}.edge.l0"), edge_width(in_width, out_width), out_width, rng);
    store.init_linear(&format!("{prefix}.update.l0"), 2 * out_width + in_width, out_width, rng);
}

/// Edge rows for `P` points with `k` neighbours each, point-major.
struct EdgeBlock<'a> {
    points: &'a PointCloud,
    neighbor_coords: &'a PointCloud,
    neighbors: Vec<usize>,
    k: usize,
}

impl EdgeBlock<'_> {
    fn offsets(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.neighbors.len() * 3);
        for (i, &x) in self.points.points().iter().enumerate() {
            for &j in &self.neighbors[i * self.k..(i + 1) * self.k] {
                out.extend_from_slice(&sub(self.neighbor_coords.point(j), x));
            }
        }
        out
    }
}

/// One recurrent step at one level.
///
/// `in_feats` is `[P × in_width]` when present. `out_width` must match the
/// state width and the stored parameters.
#[allow(clippy::too_many_arguments)]
pub fn cell_step(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    points: &PointCloud,
    in_feats: Option<Var>,
    state: &CellState,
    k: usize,
    out_width: usize,
) -> Result<CellOutput> {
    let p = points.len();
    if k == 0 || k > p {
        return Err(Error::TooFewPoints { k, available: p });
    }
    let in_width = match in_feats {
        Some(f) => {
            let (rows, cols) = tape.dims(f);
            if rows != p {
                return Err(Error::Shape(format!("{rows} feature rows for {p} points")));
            }
            cols
        }
        None => 0,
    };
    let edge_w = store
        .get(&format!("{prefix}.edge.l0.weight"))
        .ok_or_else(|| Error::MissingParam(format!("{prefix}.edge.l0.weight")))?
        .shape()[0];
    if edge_w != edge_width(in_width, out_width) {
        return Err(Error::Shape(format!(
            "`{prefix}` was built for edge width {edge_w}, inputs give {}",
            edge_width(in_width, out_width)
        )));
    }

    let spatial = EdgeBlock {
        points,
        neighbor_coords: points,
        neighbors: knn(points, points, k)?.flat_indices().to_vec(),
        k,
    };
    let self_idx: Vec<usize> = (0..p).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let (temporal, state_feats) = match state {
        CellState::Empty => (
            EdgeBlock {
                points,
                neighbor_coords: points,
                neighbors: self_idx.clone(),
                k,
            },
            None,
        ),
        CellState::Active { coords, feats } => {
            if k > coords.len() {
                return Err(Error::TooFewPoints {
                    k,
                    available: coords.len(),
                });
            }
            let (rows, cols) = tape.dims(*feats);
            if rows != coords.len() || cols != out_width {
                return Err(Error::Shape(format!("state is {rows}×{cols}, expected {}×{out_width}", coords.len())));
            }
            (
                EdgeBlock {
                    points,
                    neighbor_coords: coords,
                    neighbors: knn(points, coords, k)?.flat_indices().to_vec(),
                    k,
                },
                Some(*feats),
            )
        }
    };

    // The edge layer is affine in the concatenated edge vector, so it is
    // evaluated block-wise: per-point projections are computed once and
    // gathered onto edges, and the zero slots drop out.
    let w = tape.param(store, &format!("{prefix}.edge.l0.weight"))?;
    let b = tape.param(store, &format!("{prefix}.edge.l0.bias"))?;
    let w_dx = tape.row_block(w, 0, 3)?;
    let w_t = tape.row_block(w, 3 + 2 * in_width, out_width)?;
    let (center, spatial_table) = match in_feats {
        Some(f) => {
            let w_in = tape.row_block(w, 3, in_width)?;
            let w_s = tape.row_block(w, 3 + in_width, in_width)?;
            let c = tape.linear(f, w_in, None)?;
            let t = tape.linear(f, w_s, None)?;
            (Some(c), Some((t, spatial.neighbors.clone())))
        }
        None => (None, None),
    };
    let temporal_table = match state_feats {
        Some(s) => Some((tape.linear(s, w_t, None)?, temporal.neighbors.clone())),
        None => None,
    };
    let spatial_pool = tape.edge_max_relu(spatial.offsets(), w_dx, b, center, spatial_table, k)?;
    let temporal_pool = tape.edge_max_relu(temporal.offsets(), w_dx, b, center, temporal_table, k)?;

    let mut update_in = vec![spatial_pool, temporal_pool];
    update_in.extend(in_feats);
    let update_in = tape.concat(&update_in)?;
    let feats = shared_mlp_forward(tape, store, &format!("{prefix}.update"), &[out_width], update_in, true)?;

    Ok(CellOutput {
        feats,
        new_state: CellState::Active {
            coords: points.clone(),
            feats,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap()
    }

    fn params(in_w: usize, out_w: usize, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        init_cell_params(&mut s, "c", in_w, out_w, &mut rng);
        s
    }

    fn run(seq: &[PointCloud], store: &ParamStore, k: usize, w: usize) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let mut state = CellState::Empty;
        let mut outs = Vec::new();
        for frame in seq {
            let o = cell_step(&mut tape, store, "c", frame, None, &state, k, w).unwrap();
            outs.push(tape.value(o.feats).to_vec());
            state = o.new_state;
        }
        outs
    }

    #[test]
    fn reset_gives_empty_states() {
        let s = reset_state(3);
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(CellState::is_empty));
    }

    #[test]
    fn first_frame_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pc = random_cloud(&mut rng, 10);
        let store = params(0, 6, 1);
        let a = run(std::slice::from_ref(&pc), &store, 4, 6);
        let b = run(&[pc], &store, 4, 6);
        assert_eq!(a, b);
    }

    #[test]
    fn state_feeds_the_next_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pc = random_cloud(&mut rng, 10);
        let store = params(0, 6, 1);
        let outs = run(&[pc.clone(), pc], &store, 4, 6);
        assert_ne!(outs[0], outs[1]);
        let mut tape = Tape::new();
        let o = cell_step(&mut tape, &store, "c", &random_cloud(&mut rng, 10), None, &CellState::Empty, 4, 6).unwrap();
        assert!(!o.new_state.is_empty());
        if let CellState::Active { coords, .. } = &o.new_state {
            assert_eq!(coords.len(), 10);
        }
    }

    #[test]
    fn repeated_frame_has_matching_edge_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pc = random_cloud(&mut rng, 12);
        let spatial = EdgeBlock {
            points: &pc,
            neighbor_coords: &pc,
            neighbors: knn(&pc, &pc, 5).unwrap().flat_indices().to_vec(),
            k: 5,
        };
        let temporal = EdgeBlock {
            points: &pc,
            neighbor_coords: &pc,
            neighbors: knn(&pc, &pc, 5).unwrap().flat_indices().to_vec(),
            k: 5,
        };
        assert_eq!(spatial.offsets(), temporal.offsets());
    }

    #[test]
    fn translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq: Vec<PointCloud> = (0..3).map(|_| random_cloud(&mut rng, 12)).collect();
        let shifted: Vec<PointCloud> = seq.iter().map(|f| f.translated([3.5, -2.0, 10.0])).collect();
        let store = params(0, 5, 4);
        let a = run(&seq, &store, 4, 5);
        let b = run(&shifted, &store, 4, 5);
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seq: Vec<PointCloud> = (0..2).map(|_| random_cloud(&mut rng, 9)).collect();
        let perm = [4usize, 2, 8, 0, 1, 7, 3, 6, 5];
        let permuted: Vec<PointCloud> = seq.iter().map(|f| f.select(&perm).unwrap()).collect();
        let store = params(0, 4, 6);
        let a = run(&seq, &store, 3, 4);
        let b = run(&permuted, &store, 3, 4);
        for t in 0..2 {
            for (row, &src) in perm.iter().enumerate() {
                for d in 0..4 {
                    assert!((b[t][row * 4 + d] - a[t][src * 4 + d]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn in_features_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pc = random_cloud(&mut rng, 6);
        let store = params(2, 3, 8);
        let mut tape = Tape::new();
        let f = tape.constant(6, 2, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let o = cell_step(&mut tape, &store, "c", &pc, Some(f), &CellState::Empty, 3, 3).unwrap();
        assert_eq!(tape.dims(o.feats), (6, 3));
        assert!(cell_step(&mut tape, &store, "c", &pc, Some(f), &CellState::Empty, 7, 3).is_err());
        assert!(cell_step(&mut tape, &store, "c", &pc, None, &CellState::Empty, 3, 3).is_err());
        let small = random_cloud(&mut rng, 2);
        let s2 = CellState::Active {
            coords: small,
            feats: tape.zeros(2, 3),
        };
        assert!(cell_step(&mut tape, &store, "c", &pc, Some(f), &s2, 3, 3).is_err());
    }
}
