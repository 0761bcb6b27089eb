//! On-disk sweep format, dataset index and subsequence samplers.

mod index;
mod sampling;
mod sweep_io;

pub use index::{DatasetIndex, Split};
pub use sampling::{
    area_downsample, gather_frames, relative_targets, sample_global_subsequence, sample_local_subsequence,
    subsample_evenly, SubsequenceBatch, SubsequenceRow,
};
pub use sweep_io::{load_sweep, save_sweep, FRAMES_FILE, META_FILE, POSES_FILE};

use crate::error::{Error, Result};
use crate::geometry::Trajectory;
use crate::metrics::Calibration;

/// Ordered image sequence with ground-truth world poses.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub id: String,
    num_frames: usize,
    height: usize,
    width: usize,
    frames: Vec<f32>,
    pub poses: Trajectory,
    pub cal: Calibration,
    /// Trajectory family name for generated sweeps.
    pub family: Option<String>,
    /// Phantom (subject) the sweep was acquired from.
    pub subject: Option<u64>,
}

impl Sweep {
    pub fn new(
        id: impl Into<String>,
        shape: [usize; 3],
        frames: Vec<f32>,
        poses: Trajectory,
        cal: Calibration,
    ) -> Result<Self> {
        let [n, h, w] = shape;
        if n < 2 {
            return Err(Error::invalid(format!("a sweep needs at least 2 frames, got {n}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::invalid("frame dimensions must be positive"));
        }
        if frames.len() != n * h * w {
            return Err(Error::invalid(format!("frame buffer holds {} values, expected {}", frames.len(), n * h * w)));
        }
        if poses.len() != n {
            return Err(Error::invalid(format!("{} poses for {n} frames", poses.len())));
        }
        if let Some(v) = frames.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("frame value {v} outside [0, 1]")));
        }
        Ok(Self { id: id.into(), num_frames: n, height: h, width: w, frames, poses, cal, family: None, subject: None })
    }

    pub fn len(&self) -> usize {
        self.num_frames
    }

    pub fn is_empty(&self) -> bool {
        self.num_frames == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.num_frames, self.height, self.width]
    }

    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let sz = self.height * self.width;
        &self.frames[i * sz..(i + 1) * sz]
    }
}
