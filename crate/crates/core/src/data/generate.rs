//! Synthetic dynamic point clouds with controllable global and local motion.
//!
//! Every preset combines a translating body with zero or more rigid parts
//! rotating about hinges carried by the body, which gives sequences whose
//! motion is part global translation and part local rotation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::PointCloudSequence;
use crate::error::{Error, Result};
use crate::geometry::{add, sub, Point, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetKind {
    RigidTranslation,
    TranslatingRotor,
    ArticulatedWalker,
}

impl PresetKind {
    pub const ALL: [PresetKind; 3] = [
        PresetKind::RigidTranslation,
        PresetKind::TranslatingRotor,
        PresetKind::ArticulatedWalker,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PresetKind::RigidTranslation => "rigid_translation",
            PresetKind::TranslatingRotor => "translating_rotor",
            PresetKind::ArticulatedWalker => "articulated_walker",
        }
    }
}

impl std::str::FromStr for PresetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PresetKind::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<_> = PresetKind::ALL.iter().map(|p| p.name()).collect();
            Error::Config(format!("unknown preset `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionPreset {
    pub kind: PresetKind,
    /// Body translation per frame.
    pub velocity: Point,
    /// Rotor angular speed, radians per frame.
    pub omega: f64,
    /// Walker limb swing amplitude, radians.
    pub amplitude: f64,
    /// Walker swing period, frames.
    pub period: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl MotionPreset {
    pub fn new(kind: PresetKind, seed: u64) -> Self {
        Self {
            kind,
            velocity: [0.04, 0.0, 0.0],
            omega: 0.2,
            amplitude: 0.5,
            period: 8.0,
            noise_sigma: 0.0,
            seed,
        }
    }
}

/// Rotation about the z axis.
pub fn rotate_z(angle: f64, v: Point) -> Point {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
}

fn scale(v: Point, s: f64) -> Point {
    [v[0] * s, v[1] * s, v[2] * s]
}

fn unit_sphere(rng: &mut ChaCha8Rng) -> Point {
    loop {
        let v: Point = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return scale(v, 1.0 / n);
        }
    }
}

fn ellipsoid(rng: &mut ChaCha8Rng, center: Point, radii: Point) -> Point {
    let u = unit_sphere(rng);
    add(center, [u[0] * radii[0], u[1] * radii[1], u[2] * radii[2]])
}

/// Thin cylinder hanging from `hinge` along −y.
fn limb(rng: &mut ChaCha8Rng, hinge: Point, length: f64, radius: f64) -> Point {
    let t: f64 = rng.random_range(0.05..1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    [
        hinge[0] + radius * phi.cos(),
        hinge[1] - t * length,
        hinge[2] + radius * phi.sin(),
    ]
}

type SwingFn = Box<dyn Fn(f64) -> f64>;

struct Part {
    points: Vec<Point>,
    label: i32,
    /// Hinge in the body frame and swing angle per frame; `None` for the body.
    hinge: Option<(Point, SwingFn)>,
}

pub const ROTOR_HINGE: Point = [1.0, 0.0, 0.0];
pub const WALKER_HINGES: [Point; 2] = [[0.0, -0.6, 0.15], [0.0, -0.6, -0.15]];

fn parts(preset: &MotionPreset, n: usize, rng: &mut ChaCha8Rng) -> Vec<Part> {
    match preset.kind {
        PresetKind::RigidTranslation => vec![Part {
            points: (0..n).map(|_| unit_sphere(rng)).collect(),
            label: 0,
            hinge: None,
        }],
        PresetKind::TranslatingRotor => {
            let n_limb = ((n as f64 * 0.3).round() as usize).clamp(1, n - 1);
            let body = (0..n - n_limb).map(|_| unit_sphere(rng)).collect();
            let arm = (0..n_limb).map(|_| ellipsoid(rng, [1.6, 0.0, 0.0], [0.6, 0.2, 0.2])).collect();
            let omega = preset.omega;
            vec![
                Part {
                    points: body,
                    label: 0,
                    hinge: None,
                },
                Part {
                    points: arm,
                    label: 1,
                    hinge: Some((ROTOR_HINGE, Box::new(move |t| omega * t))),
                },
            ]
        }
        PresetKind::ArticulatedWalker => {
            let n_leg = ((n as f64 * 0.2).round() as usize).clamp(1, (n - 1) / 2);
            let n_torso = n - 2 * n_leg;
            let torso = (0..n_torso).map(|_| ellipsoid(rng, [0.0; 3], [0.4, 0.6, 0.3])).collect();
            let (a, period) = (preset.amplitude, preset.period);
            let swing = move |sign: f64| move |t: f64| sign * a * (std::f64::consts::TAU * t / period).sin();
            let mut out = vec![Part {
                points: torso,
                label: 0,
                hinge: None,
            }];
            for (i, (&hinge, sign)) in WALKER_HINGES.iter().zip([1.0, -1.0]).enumerate() {
                out.push(Part {
                    points: (0..n_leg).map(|_| limb(rng, hinge, 0.9, 0.06)).collect(),
                    label: i as i32 + 1,
                    hinge: Some((hinge, Box::new(swing(sign)))),
                });
            }
            out
        }
    }
}

/// Generate `n_frames` frames of `n_points` points.
///
/// Shapes are sampled from `preset.seed`; the noise stream is independent of
/// the shape stream. Point `i` is the same material point in every frame.
pub fn generate_sequence(preset: &MotionPreset, n_points: usize, n_frames: usize) -> Result<PointCloudSequence> {
    if n_points < 8 {
        return Err(Error::Config(format!("at least 8 points are required, got {n_points}")));
    }
    if n_frames < 2 {
        return Err(Error::Config(format!("at least 2 frames are required, got {n_frames}")));
    }
    if !(preset.noise_sigma >= 0.0) {
        return Err(Error::Config("noise sigma must be non-negative".into()));
    }
    if preset.kind == PresetKind::ArticulatedWalker && !(preset.period > 0.0) {
        return Err(Error::Config("walker period must be positive".into()));
    }
    let mut shape_rng = ChaCha8Rng::seed_from_u64(preset.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(preset.seed);
    noise_rng.set_stream(1);
    let noise = Normal::new(0.0, preset.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let parts = parts(preset, n_points, &mut shape_rng);
    let labels: Vec<i32> = parts.iter().flat_map(|p| std::iter::repeat_n(p.label, p.points.len())).collect();
    let mut frames = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let shift = scale(preset.velocity, t as f64);
        let mut pts = Vec::with_capacity(n_points);
        for part in &parts {
            for &p in &part.points {
                let local = match &part.hinge {
                    None => p,
                    Some((h, angle)) => add(*h, rotate_z(angle(t as f64), sub(p, *h))),
                };
                let mut q = add(local, shift);
                if preset.noise_sigma > 0.0 {
                    for c in q.iter_mut() {
                        *c += noise.sample(&mut noise_rng);
                    }
                }
                pts.push(q);
            }
        }
        frames.push(PointCloud::new(pts)?);
    }
    let mut seq = PointCloudSequence::new(frames, 1.0)?;
    seq.labels = Some(labels);
    seq.preset = Some(preset.kind.name().to_string());
    seq.seed = Some(preset.seed);
    Ok(seq)
}
