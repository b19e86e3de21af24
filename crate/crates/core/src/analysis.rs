//! Per-level motion contributions by zero-masking, variance diagnostics and
//! PCA colouring of features.
//!
//! Level `l` contributes `M^l`: the motion predicted when only level `l`
//! keeps its features at the input of the propagation phase. With every
//! level masked the network still outputs a bias field `B`, so for an
//! affine propagation path `M = Σ_l M^l − (L−1)·B`; the residual measures
//! how far the trained network is from that.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::ply::{fmt_coord, write_ply};
use crate::diffcore::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::network::{fp_forward_from, predict_next, ArchitectureConfig, LevelSnapshot, MotionField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// `M^l`, finest level first.
    pub levels: Vec<MotionField>,
    pub full: MotionField,
    pub bias_field: MotionField,
    /// RMS over points of `M − Σ M^l + (L−1)·B`.
    pub residual: f64,
}

/// Run propagation and head with the level features in `keep` and zeros
/// elsewhere.
fn masked_motion(
    params: &ParamStore,
    cfg: &ArchitectureConfig,
    frame: &PointCloud,
    levels: &LevelSnapshot,
    keep: impl Fn(usize) -> bool,
) -> Result<MotionField> {
    let mut tape = Tape::new();
    let mut feats = Vec::with_capacity(levels.feats.len());
    for (l, (f, &w)) in levels.feats.iter().zip(&levels.widths).enumerate() {
        let rows = levels.coords[l].len();
        let v = if keep(l) {
            tape.constant(rows, w, f.clone())?
        } else {
            tape.zeros(rows, w)
        };
        feats.push(v);
    }
    let f_final = fp_forward_from(&mut tape, params, cfg, frame, &levels.coords, &feats)?;
    let (motion, _) = predict_next(&mut tape, params, frame, f_final)?;
    Ok(MotionField::from_flat(tape.value(motion)))
}

pub fn decomposition_residual(full: &MotionField, levels: &[MotionField], bias: &MotionField) -> f64 {
    let n = full.len();
    if n == 0 {
        return 0.0;
    }
    let extra = levels.len() as f64 - 1.0;
    let mut total = 0.0;
    for i in 0..n {
        for c in 0..3 {
            let sum: f64 = levels.iter().map(|m| m.vectors[i][c]).sum();
            let r = full.vectors[i][c] - sum + extra * bias.vectors[i][c];
            total += r * r;
        }
    }
    (total / n as f64).sqrt()
}

pub fn decompose_motion(
    frame: &PointCloud,
    levels: &LevelSnapshot,
    params: &ParamStore,
    cfg: &ArchitectureConfig,
) -> Result<Decomposition> {
    let l = cfg.levels;
    if levels.feats.len() != l || levels.coords.len() != l || levels.widths.len() != l {
        return Err(Error::Shape(format!("level outputs have {} levels, config has {l}", levels.feats.len())));
    }
    for (i, (f, &w)) in levels.feats.iter().zip(&levels.widths).enumerate() {
        if f.len() != levels.coords[i].len() * w {
            return Err(Error::Shape(format!("level {} features do not match its coordinates", i + 1)));
        }
    }
    let full = masked_motion(params, cfg, frame, levels, |_| true)?;
    let bias_field = masked_motion(params, cfg, frame, levels, |_| false)?;
    let parts = (0..l)
        .map(|keep| masked_motion(params, cfg, frame, levels, |i| i == keep))
        .collect::<Result<Vec<_>>>()?;
    let residual = decomposition_residual(&full, &parts, &bias_field);
    Ok(Decomposition {
        levels: parts,
        full,
        bias_field,
        residual,
    })
}

/// Trace of the population covariance of `vectors`, i.e. the mean squared
/// distance to their mean.
pub fn covariance_trace(vectors: &[Point]) -> f64 {
    if vectors.is_empty() {
        return 0.0;
    }
    let n = vectors.len() as f64;
    let mut mean = [0.0; 3];
    for v in vectors {
        for c in 0..3 {
            mean[c] += v[c] / n;
        }
    }
    vectors
        .iter()
        .map(|v| (0..3).map(|c| (v[c] - mean[c]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldVariance {
    pub overall: f64,
    /// Keyed by segment label.
    pub per_segment: BTreeMap<i32, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceProfile {
    /// Finest level first.
    pub levels: Vec<FieldVariance>,
    pub full: FieldVariance,
    pub residual: f64,
}

fn field_variance(field: &MotionField, labels: Option<&[i32]>) -> FieldVariance {
    let mut per_segment = BTreeMap::new();
    if let Some(labels) = labels {
        let mut groups: BTreeMap<i32, Vec<Point>> = BTreeMap::new();
        for (v, &l) in field.vectors.iter().zip(labels) {
            groups.entry(l).or_default().push(*v);
        }
        for (l, vs) in groups {
            per_segment.insert(l, covariance_trace(&vs));
        }
    }
    FieldVariance {
        overall: covariance_trace(&field.vectors),
        per_segment,
    }
}

pub fn motion_variance_profile(decomp: &Decomposition, labels: Option<&[i32]>) -> Result<VarianceProfile> {
    if let Some(l) = labels {
        if l.len() != decomp.full.len() {
            return Err(Error::Shape(format!("{} labels for {} points", l.len(), decomp.full.len())));
        }
    }
    Ok(VarianceProfile {
        levels: decomp.levels.iter().map(|m| field_variance(m, labels)).collect(),
        full: field_variance(&decomp.full, labels),
        residual: decomp.residual,
    })
}

/// Project row-major `[n × width]` features onto their top three principal
/// components and min-max scale each channel to `[0, 1]`.
///
/// Each component is signed so that its largest-magnitude loading is
/// positive. Channels beyond the numerical rank, or with no spread, are 0.5.
pub fn pca_feature_colors(feats: &[f64], width: usize) -> Result<Vec<[f64; 3]>> {
    if width == 0 || !feats.len().is_multiple_of(width) {
        return Err(Error::Shape(format!("{} values do not form rows of width {width}", feats.len())));
    }
    let n = feats.len() / width;
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut mean = vec![0.0; width];
    for row in feats.chunks_exact(width) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, width, |i, j| feats[i * width + j] - mean[j]);
    let cov = (x.transpose() * &x) / n as f64;
    let scale = feats.iter().map(|v| v * v).sum::<f64>() / feats.len() as f64;
    let floor = 1e-20 * scale.max(f64::MIN_POSITIVE);

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut colors = vec![[0.5; 3]; n];
    for (ch, &k) in order.iter().take(3).enumerate() {
        if !(eig.eigenvalues[k] > floor) {
            break;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let lead = (0..width).fold(0, |best, j| if v[j].abs() > v[best].abs() { j } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|c| *c = -*c);
        }
        let proj: Vec<f64> = (0..n).map(|i| (0..width).map(|j| x[(i, j)] * v[j]).sum()).collect();
        let (lo, hi) = proj.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| (lo.min(p), hi.max(p)));
        if hi > lo {
            for (c, p) in colors.iter_mut().zip(&proj) {
                c[ch] = (p - lo) / (hi - lo);
            }
        }
    }
    Ok(colors)
}

pub fn to_rgb8(c: [f64; 3]) -> [u8; 3] {
    c.map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
}

pub fn motion_csv_header(fields: usize) -> String {
    let mut s = String::from("x,y,z");
    for f in 1..=fields {
        let _ = write!(s, ",dx_{f},dy_{f},dz_{f}");
    }
    s
}

pub fn render_motion_csv(frame: &PointCloud, fields: &[&MotionField]) -> Result<String> {
    for f in fields {
        if f.len() != frame.len() {
            return Err(Error::Cardinality(f.len(), frame.len()));
        }
    }
    let mut s = motion_csv_header(fields.len());
    s.push('\n');
    for (i, p) in frame.points().iter().enumerate() {
        let cells = p.iter().chain(fields.iter().flat_map(|f| f.vectors[i].iter()));
        let row: Vec<String> = cells.map(|&v| fmt_coord(v)).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    Ok(s)
}

/// Colour each point by its direction in the field with the largest total
/// magnitude.
pub fn motion_colors(fields: &[&MotionField]) -> Result<Vec<[u8; 3]>> {
    let energy = |f: &MotionField| f.vectors.iter().map(|v| v.iter().map(|c| c * c).sum::<f64>()).sum::<f64>();
    let Some(dominant) = fields.iter().copied().reduce(|a, b| if energy(b) > energy(a) { b } else { a }) else {
        return Ok(Vec::new());
    };
    let dirs: Vec<f64> = dominant
        .vectors
        .iter()
        .flat_map(|v| {
            let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
            if n > 0.0 {
                [v[0] / n, v[1] / n, v[2] / n]
            } else {
                [0.0; 3]
            }
        })
        .collect();
    Ok(pca_feature_colors(&dirs, 3)?.into_iter().map(to_rgb8).collect())
}

/// Writes the CSV at `csv_path` and a coloured PLY next to it. Returns the
/// PLY path.
pub fn export_motion(frame: &PointCloud, fields: &[&MotionField], csv_path: &Path) -> Result<PathBuf> {
    let csv = render_motion_csv(frame, fields)?;
    fs::write(csv_path, csv).map_err(|e| Error::io(csv_path, e))?;
    let ply_path = csv_path.with_extension("ply");
    let colors = motion_colors(fields)?;
    let colors = if colors.is_empty() { vec![[128; 3]; frame.len()] } else { colors };
    write_ply(&ply_path, frame.points(), None, Some(&colors))?;
    Ok(ply_path)
}

/// Parse a file written by [`render_motion_csv`].
pub fn parse_motion_csv(text: &str, path: &Path) -> Result<(PointCloud, Vec<MotionField>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(path, "empty file"))?;
    let cols = header.split(',').count();
    if cols < 3 || (cols - 3) % 3 != 0 || header != motion_csv_header((cols - 3) / 3) {
        return Err(Error::format(path, "unexpected header"));
    }
    let nf = (cols - 3) / 3;
    let mut points = Vec::new();
    let mut fields = vec![Vec::new(); nf];
    for (row, line) in lines.filter(|l| !l.is_empty()).enumerate() {
        let vals = line
            .split(',')
            .map(|t| t.parse::<f64>().map_err(|_| Error::format(path, format!("row {row}: bad number `{t}`"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != cols {
            return Err(Error::format(path, format!("row {row} has {} columns", vals.len())));
        }
        points.push([vals[0], vals[1], vals[2]]);
        for (f, field) in fields.iter_mut().enumerate() {
            let o = 3 + 3 * f;
            field.push([vals[o], vals[o + 1], vals[o + 2]]);
        }
    }
    let cloud = PointCloud::new(points).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((cloud, fields.into_iter().map(|vectors| MotionField { vectors }).collect()))
}

pub fn read_motion_csv(path: &Path) -> Result<(PointCloud, Vec<MotionField>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_motion_csv(&text, path)
}
