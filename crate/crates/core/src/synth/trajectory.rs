use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{params_to_matrix, relative_transform, PoseParams, Trajectory};
use crate::metrics::{frame_points, Calibration};

pub const MIN_STEP_MM: f64 = 0.1;
pub const MAX_STEP_MM: f64 = 1.0;
const STEP_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Linear,
    CShape,
    SShape,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Linear, Family::CShape, Family::SShape];

    pub fn name(self) -> &'static str {
        match self {
            Family::Linear => "linear",
            Family::CShape => "c-shape",
            Family::SShape => "s-shape",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown trajectory family {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub family: Family,
    /// Path length for `linear`, elevational extent for `c-shape`, and the
    /// base elevational scale for `s-shape`.
    pub length_mm: f64,
    pub num_frames: usize,
    /// Amplitude of the smooth rotation profile (degrees).
    pub rot_amplitude_deg: f64,
    pub seed: u64,
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_frames < 2 {
            return Err(Error::invalid(format!("num_frames must be >= 2, got {}", self.num_frames)));
        }
        if !(self.length_mm > 0.0 && self.length_mm.is_finite()) {
            return Err(Error::invalid(format!("length_mm must be positive, got {}", self.length_mm)));
        }
        if !(self.rot_amplitude_deg >= 0.0 && self.rot_amplitude_deg.is_finite()) {
            return Err(Error::invalid("rot_amplitude_deg must be non-negative"));
        }
        Ok(())
    }
}

/// Where frames may be placed: the phantom extent and the image footprint
/// in probe coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Placement {
    pub extent_mm: [f64; 3],
    pub corners: [Vector3<f64>; 4],
}

impl Placement {
    pub fn new(extent_mm: [f64; 3], cal: &Calibration, width: usize, height: usize) -> Result<Self> {
        let p = frame_points(cal, width, height)?;
        Ok(Self { extent_mm, corners: [p[0], p[1], p[2], p[3]] })
    }

    fn footprint_center(&self) -> Vector3<f64> {
        self.corners.iter().sum::<Vector3<f64>>() / 4.0
    }
}

struct Profile {
    pos: Vec<Vector3<f64>>,
    rot: Vec<[f64; 3]>,
}

fn profile(spec: &TrajectorySpec, rng: &mut ChaCha8Rng) -> Profile {
    let n = spec.num_frames;
    let l = spec.length_mm;
    let a = spec.rot_amplitude_deg;
    let s: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let mut amp = || if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 };
    match spec.family {
        Family::Linear => {
            let r = [amp(), amp(), amp()];
            let slope = rng.gen_range(-0.15..0.15);
            let dir = Vector3::new(slope, 0.0, 1.0).normalize();
            Profile { pos: s.iter().map(|&t| dir * (l * t)).collect(), rot: vec![r; n] }
        }
        Family::CShape => {
            let amps = [amp(), amp(), amp()];
            let lateral = rng.gen_range(2.0..4.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            Profile {
                pos: s.iter().map(|&t| Vector3::new(lateral * (PI * t).sin(), 0.0, l * t)).collect(),
                rot: s.iter().map(|&t| amps.map(|c| c * (PI * t).sin())).collect(),
            }
        }
        Family::SShape => {
            let amps = [amp(), amp(), amp()];
            let phases = [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)];
            let beta = rng.gen_range(1.7..2.1);
            let drift = rng.gen_range(8.5..10.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let wobble = rng.gen_range(0.0..0.25);
            let ph = rng.gen_range(0.0..2.0 * PI);
            Profile {
                pos: s
                    .iter()
                    .map(|&t| {
                        let z = l * (t + beta * (2.0 * PI * t).sin() / (2.0 * PI));
                        Vector3::new(drift * t + wobble * (2.0 * PI * t + ph).sin(), 0.0, z)
                    })
                    .collect(),
                rot: s
                    .iter()
                    .map(|&t| std::array::from_fn(|k| amps[k] * ((2.0 * PI * t + phases[k]).sin() - phases[k].sin())))
                    .collect(),
            }
        }
    }
}

/// Generates a sweep trajectory centred in the phantom. Every frame's image
/// footprint must stay inside the phantom and every adjacent step must move
/// between [`MIN_STEP_MM`] and [`MAX_STEP_MM`].
pub fn make_trajectory(spec: &TrajectorySpec, placement: &Placement) -> Result<Trajectory> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prof = profile(spec, &mut rng);
    let (mut lo, mut hi) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
    for p in &prof.pos {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let center = Vector3::from(placement.extent_mm.map(|e| e / 2.0));
    let offset = center - (lo + hi) / 2.0 - placement.footprint_center();
    let poses = prof
        .pos
        .iter()
        .zip(&prof.rot)
        .map(|(p, r)| {
            let t = p + offset;
            params_to_matrix(&PoseParams::new([t.x, t.y, t.z], *r))
        })
        .collect::<Result<Vec<_>>>()?;
    let traj = Trajectory::new(poses)?;

    for (i, w) in traj.poses().windows(2).enumerate() {
        let step = relative_transform(&w[0], &w[1]).translation().norm();
        if !(MIN_STEP_MM - STEP_TOL..=MAX_STEP_MM + STEP_TOL).contains(&step) {
            return Err(Error::Generation(format!(
                "{} step {i} moves {step:.4} mm, outside [{MIN_STEP_MM}, {MAX_STEP_MM}]",
                spec.family
            )));
        }
    }
    for (i, pose) in traj.poses().iter().enumerate() {
        for c in &placement.corners {
            let q = pose.transform_point(c);
            if (0..3).any(|a| q[a] < 0.0 || q[a] > placement.extent_mm[a]) {
                return Err(Error::Generation(format!(
                    "frame {i} leaves the phantom at ({:.2}, {:.2}, {:.2}) mm",
                    q.x, q.y, q.z
                )));
            }
        }
    }
    Ok(traj)
}
