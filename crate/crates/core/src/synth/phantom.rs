use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_PHANTOM_SIZE: usize = 32;
const SPECKLE_MEAN: f64 = 0.5;
const SPECKLE_CONTRAST: f64 = 0.15;
const FINE_SIGMA_VOX: f64 = 1.0;
const COARSE_SIGMA_VOX: f64 = 4.0;
/// Half-width of the smooth landmark boundary, in units of the radius.
const EDGE: f64 = 0.15;
/// Depth change of the oblique template tube per millimetre along z.
pub const OBLIQUE_SLOPE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Landmark {
    Ellipsoid { center: [f64; 3], radii: [f64; 3], intensity: f64 },
    /// Cylinder of constant radius around the segment `start..end`.
    Tube { start: [f64; 3], end: [f64; 3], radius: f64, intensity: f64 },
}

impl Landmark {
    /// Normalised distance: 1 on the surface, < 1 inside.
    fn distance(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Landmark::Ellipsoid { center, radii, .. } => {
                let d = p - Vector3::from(*center);
                ((d.x / radii[0]).powi(2) + (d.y / radii[1]).powi(2) + (d.z / radii[2]).powi(2)).sqrt()
            }
            Landmark::Tube { start, end, radius, .. } => {
                let a = Vector3::from(*start);
                let ab = Vector3::from(*end) - a;
                let s = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
                (p - (a + ab * s)).norm() / radius
            }
        }
    }

    fn intensity(&self) -> f64 {
        match self {
            Landmark::Ellipsoid { intensity, .. } | Landmark::Tube { intensity, .. } => *intensity,
        }
    }

    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let pad = 1.0 + EDGE;
        match self {
            Landmark::Ellipsoid { center, radii, .. } => {
                (std::array::from_fn(|i| center[i] - radii[i] * pad), std::array::from_fn(|i| center[i] + radii[i] * pad))
            }
            Landmark::Tube { start, end, radius, .. } => (
                std::array::from_fn(|i| start[i].min(end[i]) - radius * pad),
                std::array::from_fn(|i| start[i].max(end[i]) + radius * pad),
            ),
        }
    }
}

fn smooth_weight(d: f64) -> f64 {
    let t = ((1.0 + EDGE - d) / (2.0 * EDGE)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Procedural speckle volume with smooth landmark structures. Voxel
/// `(i, j, k)` sits at world position `(i, j, k) * spacing` mm; storage is
/// x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    size: [usize; 3],
    spacing: f64,
    volume: Vec<f32>,
    pub landmarks: Vec<Landmark>,
}

impl Phantom {
    pub fn size(&self) -> [usize; 3] {
        self.size
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn volume(&self) -> &[f32] {
        &self.volume
    }

    /// World extent along each axis (mm).
    pub fn extent(&self) -> [f64; 3] {
        self.size.map(|n| (n - 1) as f64 * self.spacing)
    }

    fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.size[1] + j) * self.size[0] + i
    }

    pub fn voxel(&self, i: usize, j: usize, k: usize) -> f32 {
        self.volume[self.idx(i, j, k)]
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let e = self.extent();
        (0..3).all(|a| p[a] >= 0.0 && p[a] <= e[a])
    }

    /// Trilinear interpolation at a world position, `None` outside.
    pub fn sample(&self, p: &Vector3<f64>) -> Option<f64> {
        if !self.contains(p) {
            return None;
        }
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let g = p[a] / self.spacing;
            let i = (g.floor() as usize).min(self.size[a] - 2);
            base[a] = i;
            frac[a] = g - i as f64;
        }
        let mut acc = 0.0;
        for dz in 0..2 {
            let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
            for dy in 0..2 {
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                for dx in 0..2 {
                    let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                    acc += wx * wy * wz * self.voxel(base[0] + dx, base[1] + dy, base[2] + dz) as f64;
                }
            }
        }
        Some(acc)
    }

    pub fn mean(&self) -> f64 {
        self.volume.iter().map(|&v| v as f64).sum::<f64>() / self.volume.len() as f64
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with edge replication.
fn blur3(data: &[f64], size: [usize; 3], sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let strides = [1, size[0], size[0] * size[1]];
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let n = size[axis] as isize;
        let st = strides[axis];
        let mut next = vec![0.0; cur.len()];
        for (idx, out) in next.iter_mut().enumerate() {
            let pos = ((idx / st) % size[axis]) as isize;
            let base = idx - pos as usize * st;
            let mut acc = 0.0;
            for (t, &w) in kernel.iter().enumerate() {
                let q = (pos + t as isize - r).clamp(0, n - 1) as usize;
                acc += w * cur[base + q * st];
            }
            *out = acc;
        }
        cur = next;
    }
    cur
}

/// The default landmark layout: a straight bright tube along z, a dark tube
/// whose depth changes linearly with z, and random ellipsoids.
pub fn template_landmarks(extent: [f64; 3], n_landmarks: usize, rng: &mut impl Rng) -> Vec<Landmark> {
    let c = extent.map(|e| e / 2.0);
    let mut out = Vec::with_capacity(n_landmarks);
    if n_landmarks >= 1 {
        out.push(Landmark::Tube {
            start: [c[0] - 3.0, c[1], -extent[2]],
            end: [c[0] - 3.0, c[1], 2.0 * extent[2]],
            radius: 2.0,
            intensity: 0.3,
        });
    }
    if n_landmarks >= 2 {
        let dy = OBLIQUE_SLOPE * c[2];
        out.push(Landmark::Tube {
            start: [c[0] + 3.0, c[1] - dy, 0.0],
            end: [c[0] + 3.0, c[1] + dy, extent[2]],
            radius: 1.6,
            intensity: -0.35,
        });
    }
    while out.len() < n_landmarks {
        let center = [rng.gen_range(0.0..extent[0]), rng.gen_range(0.0..extent[1]), rng.gen_range(0.0..extent[2])];
        let radii = [rng.gen_range(1.5..4.0), rng.gen_range(1.5..4.0), rng.gen_range(1.5..4.0)];
        let mag = rng.gen_range(0.2..0.4);
        let intensity = if rng.gen_bool(0.5) { mag } else { -mag };
        out.push(Landmark::Ellipsoid { center, radii, intensity });
    }
    out
}

/// Speckle volume plus the default landmark template.
pub fn make_phantom(seed: u64, size: usize, spacing: f64, n_landmarks: usize) -> Result<Phantom> {
    let extent = [(size.max(1) - 1) as f64 * spacing; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let landmarks = template_landmarks(extent, n_landmarks, &mut rng);
    make_phantom_with(seed, [size; 3], spacing, landmarks)
}

/// Speckle volume with an explicit landmark list.
pub fn make_phantom_with(seed: u64, size: [usize; 3], spacing: f64, landmarks: Vec<Landmark>) -> Result<Phantom> {
    if size.iter().any(|&n| n < MIN_PHANTOM_SIZE) {
        return Err(Error::invalid(format!("phantom must be at least {MIN_PHANTOM_SIZE}^3 voxels, got {size:?}")));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::invalid(format!("voxel spacing must be positive, got {spacing}")));
    }
    let n = size.iter().product::<usize>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let fine = blur3(&white, size, FINE_SIGMA_VOX);
    let coarse = blur3(&white, size, COARSE_SIGMA_VOX);
    let mut band: Vec<f64> = fine.iter().zip(&coarse).map(|(a, b)| a - b).collect();
    let mean = band.iter().sum::<f64>() / n as f64;
    let std = (band.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-12);
    band.iter_mut().for_each(|v| *v = SPECKLE_MEAN + SPECKLE_CONTRAST * (*v - mean) / std);

    for lm in &landmarks {
        let (lo, hi) = lm.bounds();
        let range = |a: usize| {
            let a0 = (lo[a] / spacing).floor().max(0.0) as usize;
            let a1 = ((hi[a] / spacing).ceil().max(0.0) as usize).min(size[a] - 1);
            a0..=a1
        };
        for k in range(2) {
            for j in range(1) {
                for i in range(0) {
                    let p = Vector3::new(i as f64, j as f64, k as f64) * spacing;
                    let w = smooth_weight(lm.distance(&p));
                    if w > 0.0 {
                        band[(k * size[1] + j) * size[0] + i] += lm.intensity() * w;
                    }
                }
            }
        }
    }
    let volume = band.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Ok(Phantom { size, spacing, volume, landmarks })
}
