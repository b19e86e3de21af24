//! Full prediction network: sampling and recurrent cells per level, feature
//! propagation back to full resolution, and the motion head. Four wirings
//! are supported; they differ only in how levels are chained and combined.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{cell_step, init_cell_params, CellState};
use crate::data::PointCloudSequence;
use crate::diffcore::{linear, shared_mlp_forward, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, idw_weights, Point, PointCloud, IDW_K, IDW_POWER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Stacked cells over a progressively sampled cloud, all levels combined.
    Classic,
    /// Same sampling chain as `Classic`, but every cell sees only raw
    /// coordinates at its level.
    Shallow,
    /// Stacked cells without downsampling.
    SingleScale,
    /// Same extraction as `Classic`; only the top level reaches the head.
    WithoutCombination,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Classic,
        Variant::Shallow,
        Variant::SingleScale,
        Variant::WithoutCombination,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Classic => "classic",
            Variant::Shallow => "shallow",
            Variant::SingleScale => "single-scale",
            Variant::WithoutCombination => "without-combination",
        }
    }

    fn stacked(self) -> bool {
        !matches!(self, Variant::Shallow)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::Config(format!("unknown variant `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    pub variant: Variant,
    pub levels: usize,
    pub downsample_factor: usize,
    /// Neighbourhood size per level, clamped to the level's point count.
    pub k: Vec<usize>,
    pub feature_widths: Vec<usize>,
    /// Layer widths of each propagation stage, top stage first.
    pub fp_widths: Vec<Vec<usize>>,
    pub seed: u64,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Classic,
            levels: 3,
            downsample_factor: 4,
            k: vec![8, 8, 8],
            feature_widths: vec![64, 128, 256],
            fp_widths: vec![vec![256, 128], vec![128, 128], vec![128, 64]],
            seed: 0,
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        let l = self.levels;
        if l == 0 {
            return Err(Error::Config("at least one level is required".into()));
        }
        if self.downsample_factor == 0 {
            return Err(Error::Config("downsample_factor must be at least 1".into()));
        }
        for (what, len) in [
            ("k", self.k.len()),
            ("feature_widths", self.feature_widths.len()),
            ("fp_widths", self.fp_widths.len()),
        ] {
            if len != l {
                return Err(Error::Config(format!("{what} has {len} entries for {l} levels")));
            }
        }
        if self.k.contains(&0) || self.feature_widths.contains(&0) {
            return Err(Error::Config("k and feature widths must be positive".into()));
        }
        if self.fp_widths.iter().any(|s| s.is_empty() || s.contains(&0)) {
            return Err(Error::Config("every propagation stage needs positive layer widths".into()));
        }
        Ok(())
    }

    /// SingleScale never downsamples, whatever the configured factor.
    pub fn effective_factor(&self) -> usize {
        match self.variant {
            Variant::SingleScale => 1,
            _ => self.downsample_factor,
        }
    }

    /// Point count at every level for an `n`-point input.
    pub fn level_sizes(&self, n: usize) -> Result<Vec<usize>> {
        let f = self.effective_factor();
        let mut sizes = Vec::with_capacity(self.levels);
        let mut cur = n;
        for l in 1..=self.levels {
            if !cur.is_multiple_of(f) || cur / f == 0 {
                return Err(Error::Config(format!(
                    "{n} points cannot be downsampled by {f} at level {l} ({cur} points left)"
                )));
            }
            cur /= f;
            sizes.push(cur);
        }
        Ok(sizes)
    }

    fn cell_in_width(&self, level: usize) -> usize {
        if level == 1 || !self.variant.stacked() {
            0
        } else {
            self.feature_widths[level - 2]
        }
    }

    /// Input width of each propagation stage, top stage first.
    fn fp_in_widths(&self) -> Vec<usize> {
        let l = self.levels;
        let mut widths = Vec::with_capacity(l);
        let mut carried = self.feature_widths[l - 1];
        for s in 0..l {
            let lower = l - 1 - s;
            let skip = if self.variant == Variant::WithoutCombination || lower == 0 {
                0
            } else {
                self.feature_widths[lower - 1]
            };
            widths.push(carried + skip);
            carried = *self.fp_widths[s].last().expect("validated non-empty");
        }
        widths
    }

    pub fn final_width(&self) -> usize {
        *self.fp_widths[self.levels - 1].last().expect("validated non-empty")
    }
}

fn cell_prefix(level: usize) -> String {
    format!("de.level{level}")
}

fn stage_prefix(stage: usize) -> String {
    format!("fp.stage{stage}")
}

pub const HEAD_PREFIX: &str = "head";

/// Fresh parameters for `cfg`, seeded by `cfg.seed`. The motion head starts
/// at zero so the untrained model copies its input.
pub fn init_params(cfg: &ArchitectureConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    for l in 1..=cfg.levels {
        init_cell_params(&mut store, &cell_prefix(l), cfg.cell_in_width(l), cfg.feature_widths[l - 1], &mut rng);
    }
    for (s, din) in cfg.fp_in_widths().into_iter().enumerate() {
        let mut fan_in = din;
        for (i, &w) in cfg.fp_widths[s].iter().enumerate() {
            store.init_linear(&format!("{}.l{i}", stage_prefix(s)), fan_in, w, &mut rng);
            fan_in = w;
        }
    }
    store.init_linear_zero(HEAD_PREFIX, cfg.final_width(), 3);
    Ok(store)
}

/// Per-level coordinates and features from one extraction pass.
#[derive(Debug, Clone)]
pub struct LevelOutputs {
    pub coords: Vec<PointCloud>,
    pub feats: Vec<Var>,
}

impl LevelOutputs {
    pub fn snapshot(&self, tape: &Tape) -> LevelSnapshot {
        LevelSnapshot {
            coords: self.coords.clone(),
            feats: self.feats.iter().map(|&f| tape.value(f).to_vec()).collect(),
            widths: self.feats.iter().map(|&f| tape.dims(f).1).collect(),
        }
    }
}

/// Tape-independent copy of [`LevelOutputs`].
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSnapshot {
    pub coords: Vec<PointCloud>,
    pub feats: Vec<Vec<f64>>,
    pub widths: Vec<usize>,
}

/// Sampling step: keep `|cloud| / factor` farthest-point centres and the
/// matching feature rows. Returns the selected indices too.
pub fn sg_module(
    tape: &mut Tape,
    cloud: &PointCloud,
    feats: Option<Var>,
    factor: usize,
    seed_index: usize,
) -> Result<(PointCloud, Option<Var>, Vec<usize>)> {
    let n = cloud.len();
    if factor == 0 || !n.is_multiple_of(factor) {
        return Err(Error::Config(format!("{n} points are not divisible by factor {factor}")));
    }
    if factor == 1 {
        return Ok((cloud.clone(), feats, (0..n).collect()));
    }
    let idx = farthest_point_sample(cloud, n / factor, seed_index)?;
    let sub = cloud.select(&idx)?;
    let carried = match feats {
        Some(f) => Some(tape.gather_rows(f, idx.clone())?),
        None => None,
    };
    Ok((sub, carried, idx))
}

/// Extraction phase for one frame.
pub fn de_forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ArchitectureConfig,
    frame: &PointCloud,
    states: &[CellState],
) -> Result<(LevelOutputs, Vec<CellState>)> {
    if states.len() != cfg.levels {
        return Err(Error::Config(format!("{} states for {} levels", states.len(), cfg.levels)));
    }
    cfg.level_sizes(frame.len())?;
    let factor = cfg.effective_factor();
    let mut coords = Vec::with_capacity(cfg.levels);
    let mut feats = Vec::with_capacity(cfg.levels);
    let mut new_states = Vec::with_capacity(cfg.levels);
    let mut cur_cloud = frame.clone();
    let mut cur_feats: Option<Var> = None;
    for l in 1..=cfg.levels {
        let (cloud, carried, _) = sg_module(tape, &cur_cloud, cur_feats, factor, 0)?;
        let input = if cfg.variant.stacked() { carried } else { None };
        let k = cfg.k[l - 1].min(cloud.len());
        let out = cell_step(
            tape,
            store,
            &cell_prefix(l),
            &cloud,
            input,
            &states[l - 1],
            k,
            cfg.feature_widths[l - 1],
        )?;
        new_states.push(out.new_state);
        cur_feats = Some(out.feats);
        feats.push(out.feats);
        coords.push(cloud.clone());
        cur_cloud = cloud;
    }
    Ok((LevelOutputs { coords, feats }, new_states))
}

fn interp(tape: &mut Tape, src: &PointCloud, feats: Var, dst: &PointCloud) -> Result<Var> {
    let stencil = idw_weights(src, dst, IDW_K.min(src.len()), IDW_POWER)?;
    tape.interpolate(feats, stencil)
}

/// Propagation phase from explicit per-level features (used directly by
/// the zero-masking analysis).
pub fn fp_forward_from(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ArchitectureConfig,
    frame: &PointCloud,
    coords: &[PointCloud],
    feats: &[Var],
) -> Result<Var> {
    let l = cfg.levels;
    if coords.len() != l || feats.len() != l {
        return Err(Error::Config(format!(
            "propagation needs {l} levels, got {} coordinate sets and {} feature maps",
            coords.len(),
            feats.len()
        )));
    }
    let mut working = feats[l - 1];
    let mut at = &coords[l - 1];
    for s in 0..l {
        let lower = l - 1 - s;
        let widths = &cfg.fp_widths[s];
        let prefix = stage_prefix(s);
        let input = if cfg.variant == Variant::WithoutCombination {
            if s == 0 {
                interp(tape, at, working, frame)?
            } else {
                working
            }
        } else {
            let dst = if lower == 0 { frame } else { &coords[lower - 1] };
            let up = interp(tape, at, working, dst)?;
            at = dst;
            if lower == 0 {
                up
            } else {
                tape.concat(&[up, feats[lower - 1]])?
            }
        };
        working = shared_mlp_forward(tape, store, &prefix, widths, input, true)?;
    }
    Ok(working)
}

pub fn fp_forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ArchitectureConfig,
    frame: &PointCloud,
    levels: &LevelOutputs,
) -> Result<Var> {
    fp_forward_from(tape, store, cfg, frame, &levels.coords, &levels.feats)
}

/// Per-point displacement vectors anchored to a frame's point order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionField {
    pub vectors: Vec<Point>,
}

impl MotionField {
    pub fn from_flat(flat: &[f64]) -> Self {
        Self {
            vectors: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            vectors: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn apply(&self, frame: &PointCloud) -> Result<PointCloud> {
        if frame.len() != self.len() {
            return Err(Error::Cardinality(frame.len(), self.len()));
        }
        PointCloud::new(frame.points().iter().zip(&self.vectors).map(|(p, v)| crate::geometry::add(*p, *v)).collect())
    }
}

/// Motion head plus the residual connection: returns `(motion, prediction)`
/// nodes, both `[N × 3]`.
pub fn predict_next(tape: &mut Tape, store: &ParamStore, frame: &PointCloud, f_final: Var) -> Result<(Var, Var)> {
    if tape.dims(f_final).0 != frame.len() {
        return Err(Error::Shape(format!("{} feature rows for {} points", tape.dims(f_final).0, frame.len())));
    }
    let motion = linear(tape, store, HEAD_PREFIX, f_final)?;
    let pred = tape.add_const(motion, &frame.to_flat())?;
    Ok((motion, pred))
}

/// Everything one full forward step produces.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub levels: LevelOutputs,
    pub f_final: Var,
    pub motion: Var,
    pub pred: Var,
}

pub fn forward_step(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ArchitectureConfig,
    frame: &PointCloud,
    states: &[CellState],
) -> Result<(StepOutput, Vec<CellState>)> {
    let (levels, states) = de_forward(tape, store, cfg, frame, states)?;
    let f_final = fp_forward(tape, store, cfg, frame, &levels)?;
    let (motion, pred) = predict_next(tape, store, frame, f_final)?;
    Ok((
        StepOutput {
            levels,
            f_final,
            motion,
            pred,
        },
        states,
    ))
}

/// Teacher-forced one-step predictions.
///
/// Frames `0..warmup-1` only advance the recurrent state. Then for each of
/// the next `horizon` targets `t = warmup, …, warmup+horizon−1` the network
/// consumes ground-truth frame `t−1` and predicts frame `t`. The returned
/// nodes are the predictions in target order.
pub fn rollout(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ArchitectureConfig,
    seq: &PointCloudSequence,
    warmup: usize,
    horizon: usize,
) -> Result<Vec<StepOutput>> {
    if warmup == 0 {
        return Err(Error::Config("warmup must be at least one frame".into()));
    }
    if warmup + horizon > seq.len() {
        return Err(Error::Config(format!(
            "warmup {warmup} + horizon {horizon} exceeds {} frames",
            seq.len()
        )));
    }
    let mut states = crate::cell::reset_state(cfg.levels);
    let mut out = Vec::with_capacity(horizon);
    for t in 0..warmup + horizon - 1 {
        let frame = &seq.frames()[t];
        if t + 1 < warmup {
            states = de_forward(tape, store, cfg, frame, &states)?.1;
        } else {
            let (step, next) = forward_step(tape, store, cfg, frame, &states)?;
            out.push(step);
            states = next;
        }
    }
    Ok(out)
}

/// [`rollout`] without keeping the tape; returns predicted clouds.
pub fn rollout_clouds(
    store: &ParamStore,
    cfg: &ArchitectureConfig,
    seq: &PointCloudSequence,
    warmup: usize,
    horizon: usize,
) -> Result<Vec<PointCloud>> {
    let mut tape = Tape::new();
    rollout(&mut tape, store, cfg, seq, warmup, horizon)?
        .iter()
        .map(|s| PointCloud::from_flat(tape.value(s.pred)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use crate::geometry::sq_dist;
    use rand::Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap()
    }

    fn small_cfg(variant: Variant, levels: usize) -> ArchitectureConfig {
        ArchitectureConfig {
            variant,
            levels,
            downsample_factor: 4,
            k: vec![4; levels],
            feature_widths: (0..levels).map(|l| 4 * (l + 1)).collect(),
            fp_widths: (0..levels).map(|_| vec![6]).collect(),
            seed: 3,
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        let err = "bogus".parse::<Variant>().unwrap_err().to_string();
        for v in Variant::ALL {
            assert!(err.contains(v.name()));
        }
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let cfg = ArchitectureConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ArchitectureConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ArchitectureConfig>(v).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = ArchitectureConfig::default();
        assert!(c.validate().is_ok());
        c.k.pop();
        assert!(c.validate().is_err());
        let c = ArchitectureConfig {
            levels: 0,
            ..ArchitectureConfig::default()
        };
        assert!(c.validate().is_err());
        let mut c = ArchitectureConfig::default();
        c.fp_widths[1].clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn level_sizes_follow_wiring() {
        let c = ArchitectureConfig::default();
        assert_eq!(c.level_sizes(64).unwrap(), vec![16, 4, 1]);
        assert_eq!(c.level_sizes(256).unwrap(), vec![64, 16, 4]);
        assert!(c.level_sizes(100).is_err());
        let s = ArchitectureConfig {
            variant: Variant::SingleScale,
            ..c
        };
        assert_eq!(s.level_sizes(256).unwrap(), vec![256, 256, 256]);
    }

    #[test]
    fn sg_identity_and_fps_centres() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pc = random_cloud(&mut rng, 16);
        let mut tape = Tape::new();
        let (same, _, idx) = sg_module(&mut tape, &pc, None, 1, 0).unwrap();
        assert_eq!(same, pc);
        assert_eq!(idx, (0..16).collect::<Vec<_>>());
        let (sub, _, idx) = sg_module(&mut tape, &pc, None, 4, 0).unwrap();
        assert_eq!(sub.len(), 4);
        assert_eq!(idx, farthest_point_sample(&pc, 4, 0).unwrap());
        assert!(sg_module(&mut tape, &pc, None, 3, 0).is_err());
    }

    #[test]
    fn sg_splits_separated_clusters_evenly() {
        // dyadic coordinates keep the mirrored distances exactly equal
        let left: Vec<Point> = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.5, 0.25, 0.0],
            [0.25, 0.75, 0.0],
            [0.75, 0.5, 0.0],
            [0.125, 0.375, 0.5],
        ];
        let mut pts = left.clone();
        pts.extend(left.iter().map(|p| [p[0] + 64.0, p[1], p[2]]));
        let pc = PointCloud::new(pts).unwrap();
        let mut tape = Tape::new();
        let (_, _, idx) = sg_module(&mut tape, &pc, None, 2, 0).unwrap();
        // both clusters have 8 points; after 2 picks the rest alternate
        let left = idx.iter().filter(|&&i| i < 8).count();
        assert_eq!(left, 4);
        // exhaustive max-min check of every greedy step
        for s in 1..idx.len() {
            let chosen = &idx[..s];
            let score = |i: usize| chosen.iter().map(|&c| sq_dist(pc.point(i), pc.point(c))).fold(f64::INFINITY, f64::min);
            let best = (0..16).filter(|i| !chosen.contains(i)).map(score).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(score(idx[s]), best);
        }
    }

    #[test]
    fn single_level_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frame = random_cloud(&mut rng, 16);
        let base = small_cfg(Variant::Classic, 1);
        let params = init_params(&base).unwrap();
        let mut outputs = Vec::new();
        for v in Variant::ALL {
            let cfg = ArchitectureConfig { variant: v, downsample_factor: 1, ..base.clone() };
            let mut tape = Tape::new();
            let (step, _) = forward_step(&mut tape, &params, &cfg, &frame, &crate::cell::reset_state(1)).unwrap();
            outputs.push(tape.value(step.f_final).to_vec());
        }
        for o in &outputs[1..] {
            assert_eq!(o, &outputs[0]);
        }
    }

    #[test]
    fn shallow_shares_sampling_with_classic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frame = random_cloud(&mut rng, 64);
        let classic = small_cfg(Variant::Classic, 3);
        let shallow = small_cfg(Variant::Shallow, 3);
        let pc = init_params(&classic).unwrap();
        let ps = init_params(&shallow).unwrap();
        let mut t1 = Tape::new();
        let (a, _) = de_forward(&mut t1, &pc, &classic, &frame, &crate::cell::reset_state(3)).unwrap();
        let mut t2 = Tape::new();
        let (b, _) = de_forward(&mut t2, &ps, &shallow, &frame, &crate::cell::reset_state(3)).unwrap();
        assert_eq!(a.coords, b.coords);
        assert_eq!(a.coords.iter().map(PointCloud::len).collect::<Vec<_>>(), vec![16, 4, 1]);
        assert_ne!(t1.value(a.feats[1]), t2.value(b.feats[1]));
    }

    #[test]
    fn zero_features_and_biases_give_zero_final() {
        let cfg = small_cfg(Variant::Classic, 2);
        let params = init_params(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frame = random_cloud(&mut rng, 16);
        let coords = vec![frame.select(&[0, 1, 2, 3]).unwrap(), frame.select(&[0]).unwrap()];
        let mut tape = Tape::new();
        let feats = vec![tape.zeros(4, 4), tape.zeros(1, 8)];
        let f = fp_forward_from(&mut tape, &params, &cfg, &frame, &coords, &feats).unwrap();
        assert!(tape.value(f).iter().all(|&x| x == 0.0));
        assert!(fp_forward_from(&mut tape, &params, &cfg, &frame, &coords[..1], &feats[..1]).is_err());
    }

    #[test]
    fn without_combination_ignores_lower_levels() {
        let cfg = small_cfg(Variant::WithoutCombination, 2);
        let params = init_params(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frame = random_cloud(&mut rng, 16);
        let coords = vec![frame.select(&[0, 5, 9, 12]).unwrap(), frame.select(&[0]).unwrap()];
        let mut tape = Tape::new();
        let top = tape.constant(1, 8, (0..8).map(|i| i as f64 * 0.3).collect()).unwrap();
        let low_a = tape.constant(4, 4, (0..16).map(|i| i as f64).collect()).unwrap();
        let low_b = tape.constant(4, 4, (0..16).map(|i| -(i as f64)).collect()).unwrap();
        let fa = fp_forward_from(&mut tape, &params, &cfg, &frame, &coords, &[low_a, top]).unwrap();
        let fb = fp_forward_from(&mut tape, &params, &cfg, &frame, &coords, &[low_b, top]).unwrap();
        assert_eq!(tape.value(fa), tape.value(fb));
    }

    #[test]
    fn head_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frame = random_cloud(&mut rng, 5);
        let mut store = ParamStore::new();
        store.init_linear_zero(HEAD_PREFIX, 4, 3);
        let mut tape = Tape::new();
        let f = tape.constant(5, 4, (0..20).map(|_| rng.random()).collect()).unwrap();
        let (m, p) = predict_next(&mut tape, &store, &frame, f).unwrap();
        assert!(tape.value(m).iter().all(|&x| x == 0.0));
        assert_eq!(tape.value(p), frame.to_flat().as_slice());

        store.insert("head.bias", Tensor::new(vec![3], vec![0.1, 0.0, 0.0]).unwrap());
        let mut tape = Tape::new();
        let f = tape.constant(5, 4, vec![0.5; 20]).unwrap();
        let (_, p) = predict_next(&mut tape, &store, &frame, f).unwrap();
        let pred = PointCloud::from_flat(tape.value(p)).unwrap();
        for (a, b) in pred.points().iter().zip(frame.points()) {
            assert_eq!(a[0], b[0] + 0.1);
            assert_eq!(a[1], b[1]);
        }

        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        store.insert("head.weight", Tensor::new(vec![4, 3], w.clone()).unwrap());
        store.insert("head.bias", Tensor::new(vec![3], b.clone()).unwrap());
        let feats: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let f = tape.constant(5, 4, feats.clone()).unwrap();
        let (m, _) = predict_next(&mut tape, &store, &frame, f).unwrap();
        for i in 0..5 {
            for o in 0..3 {
                let mut s = b[o];
                for j in 0..4 {
                    s += feats[i * 4 + j] * w[j * 3 + o];
                }
                assert!((tape.value(m)[i * 3 + o] - s).abs() < 1e-12);
            }
        }
    }
}
