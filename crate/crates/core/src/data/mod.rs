//! Point cloud sequences: the synthetic generator, directory I/O and
//! normalization.

mod generate;
pub mod ply;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sq_dist, sub, Point, PointCloud};

pub use generate::{generate_sequence, rotate_z, MotionPreset, PresetKind, ROTOR_HINGE, WALKER_HINGES};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn frame_file_name(t: usize) -> String {
    format!("frame_{t:04}.ply")
}

/// Frames with index correspondence: point `i` is the same material point in
/// every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudSequence {
    frames: Vec<PointCloud>,
    pub dt: f64,
    /// Ground-truth segment ids from the generator.
    pub labels: Option<Vec<i32>>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
}

impl PointCloudSequence {
    pub fn new(frames: Vec<PointCloud>, dt: f64) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::InvalidCloud("sequence has no frames".into()));
        };
        let n = first.len();
        if let Some((t, f)) = frames.iter().enumerate().find(|(_, f)| f.len() != n) {
            return Err(Error::InvalidCloud(format!("frame {t} has {} points, frame 0 has {n}", f.len())));
        }
        Ok(Self {
            frames,
            dt,
            labels: None,
            preset: None,
            seed: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<i32>) -> Result<Self> {
        if labels.len() != self.n_points() {
            return Err(Error::Shape(format!(
                "{} labels for {} points",
                labels.len(),
                self.n_points()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn frames(&self) -> &[PointCloud] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn n_points(&self) -> usize {
        self.frames[0].len()
    }

    pub fn labels(&self) -> Option<&[i32]> {
        self.labels.as_deref()
    }

    fn map_points(&self, f: impl Fn(Point) -> Point) -> Result<Self> {
        let frames = self
            .frames
            .iter()
            .map(|fr| PointCloud::new(fr.points().iter().map(|&p| f(p)).collect()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            frames,
            dt: self.dt,
            labels: self.labels.clone(),
            preset: self.preset.clone(),
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceManifest {
    pub n_frames: usize,
    pub n_points: usize,
    pub dt: f64,
    pub preset: Option<String>,
    pub seed: Option<u64>,
}

pub fn save_sequence(seq: &PointCloudSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, frame) in seq.frames().iter().enumerate() {
        ply::write_ply(&dir.join(frame_file_name(t)), frame.points(), seq.labels(), None)?;
    }
    let manifest = SequenceManifest {
        n_frames: seq.len(),
        n_points: seq.n_points(),
        dt: seq.dt,
        preset: seq.preset.clone(),
        seed: seq.seed,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_sequence(dir: &Path) -> Result<PointCloudSequence> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: SequenceManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;

    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut on_disk = 0;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if name.starts_with("frame_") && name.ends_with(".ply") {
            on_disk += 1;
        }
    }
    if on_disk != manifest.n_frames {
        return Err(Error::format(
            &mpath,
            format!("manifest lists {} frames but {on_disk} frame files exist", manifest.n_frames),
        ));
    }

    let mut frames = Vec::with_capacity(manifest.n_frames);
    let mut labels: Option<Vec<i32>> = None;
    for t in 0..manifest.n_frames {
        let path = dir.join(frame_file_name(t));
        if !path.exists() {
            return Err(Error::format(&path, "missing frame file"));
        }
        let v = ply::read_ply(&path)?;
        if v.points.len() != manifest.n_points {
            return Err(Error::format(
                &path,
                format!("{} points, manifest says {}", v.points.len(), manifest.n_points),
            ));
        }
        if t == 0 {
            labels = v.labels;
        } else if v.labels != labels {
            return Err(Error::format(&path, "labels differ from frame 0"));
        }
        frames.push(PointCloud::new(v.points).map_err(|e| Error::format(&path, e.to_string()))?);
    }
    let mut seq = PointCloudSequence::new(frames, manifest.dt)?;
    seq.labels = labels;
    seq.preset = manifest.preset;
    seq.seed = manifest.seed;
    Ok(seq)
}

/// `x ↦ (x − center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizeTransform {
    pub center: Point,
    pub scale: f64,
}

impl NormalizeTransform {
    pub fn apply(&self, p: Point) -> Point {
        let d = sub(p, self.center);
        [d[0] / self.scale, d[1] / self.scale, d[2] / self.scale]
    }

    pub fn invert_point(&self, p: Point) -> Point {
        [
            p[0] * self.scale + self.center[0],
            p[1] * self.scale + self.center[1],
            p[2] * self.scale + self.center[2],
        ]
    }

    pub fn invert(&self, seq: &PointCloudSequence) -> Result<PointCloudSequence> {
        seq.map_points(|p| self.invert_point(p))
    }
}

/// Centre the first frame on its centroid and scale it to a unit bounding
/// sphere; every frame gets the same transform.
pub fn normalize(seq: &PointCloudSequence) -> Result<(PointCloudSequence, NormalizeTransform)> {
    let first = &seq.frames()[0];
    let center = first.centroid();
    let radius = first.points().iter().map(|&p| sq_dist(p, center)).fold(0.0, f64::max).sqrt();
    if !(radius > 0.0) {
        return Err(Error::InvalidCloud("first frame has zero radius".into()));
    }
    let tf = NormalizeTransform { center, scale: radius };
    Ok((seq.map_points(|p| tf.apply(p))?, tf))
}
