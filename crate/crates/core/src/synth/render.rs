use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Phantom;
use crate::dataset::Sweep;
use crate::error::{Error, Result};
use crate::geometry::Trajectory;
use crate::metrics::Calibration;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub width: usize,
    pub height: usize,
    /// Standard deviation of the per-pixel multiplicative noise.
    pub noise_level: f64,
    pub noise_seed: u64,
}

/// Slices the phantom on each frame plane `T_i * image_to_probe`.
pub fn render_sweep(
    id: impl Into<String>,
    phantom: &Phantom,
    traj: &Trajectory,
    cal: &Calibration,
    opts: &RenderOptions,
) -> Result<Sweep> {
    let (w, h) = (opts.width, opts.height);
    if w == 0 || h == 0 {
        return Err(Error::invalid("image dimensions must be positive"));
    }
    if !(opts.noise_level >= 0.0 && opts.noise_level.is_finite()) {
        return Err(Error::invalid(format!("noise level must be non-negative, got {}", opts.noise_level)));
    }
    let mut frames = Vec::with_capacity(traj.len() * w * h);
    for (i, pose) in traj.poses().iter().enumerate() {
        let plane = pose.compose(cal.image_to_probe());
        let [sx, sy] = cal.pixel_spacing();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.noise_seed);
        rng.set_stream(i as u64);
        for v in 0..h {
            for u in 0..w {
                let local = nalgebra::Vector3::new(u as f64 * sx, v as f64 * sy, 0.0);
                let p = plane.transform_point(&local);
                let value = phantom.sample(&p).ok_or_else(|| {
                    Error::Generation(format!("frame {i} pixel ({u}, {v}) at ({:.2}, {:.2}, {:.2}) mm is outside the phantom", p.x, p.y, p.z))
                })?;
                let value = if opts.noise_level > 0.0 {
                    let g: f64 = rng.sample(StandardNormal);
                    value * (1.0 + opts.noise_level * g)
                } else {
                    value
                };
                frames.push(value.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Sweep::new(id, [traj.len(), h, w], frames, traj.clone(), *cal)
}
