//! Trajectory error metrics: global/local point error, final drift rate and
//! maximum drift.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rebase_trajectory, relative_transform, Pose, Trajectory};

pub const MM_TO_UM: f64 = 1000.0;
const MIN_SCAN_DISTANCE_MM: f64 = 1e-6;

/// Pixel spacing plus the rigid map from image-plane millimetres to the
/// probe frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pixel_spacing: [f64; 2],
    image_to_probe: Pose,
}

impl Calibration {
    pub fn new(pixel_spacing: [f64; 2], image_to_probe: Pose) -> Result<Self> {
        if !(pixel_spacing[0] > 0.0 && pixel_spacing[1] > 0.0) || !pixel_spacing.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("pixel spacing must be positive, got {pixel_spacing:?}")));
        }
        Ok(Self { pixel_spacing, image_to_probe })
    }

    /// Probe origin at the top-centre of the image, `x` lateral, `y` depth.
    pub fn centered(pixel_spacing: [f64; 2], width: usize) -> Result<Self> {
        let half = (width.saturating_sub(1)) as f64 * pixel_spacing[0] / 2.0;
        Self::new(pixel_spacing, Pose::translation_only([-half, 0.0, 0.0]))
    }

    pub fn pixel_spacing(&self) -> [f64; 2] {
        self.pixel_spacing
    }

    pub fn image_to_probe(&self) -> &Pose {
        &self.image_to_probe
    }

    /// Probe-frame position of pixel `(u, v)`.
    pub fn pixel_to_probe(&self, u: f64, v: f64) -> Vector3<f64> {
        self.image_to_probe.transform_point(&Vector3::new(u * self.pixel_spacing[0], v * self.pixel_spacing[1], 0.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub gpe_mm: f64,
    pub lpe_um: f64,
    pub fdr_percent: f64,
    pub max_drift_mm: f64,
    pub per_frame_drift_mm: Vec<f64>,
}

/// Four corners then the centre, in probe-frame millimetres.
pub fn frame_points(cal: &Calibration, width: usize, height: usize) -> Result<[Vector3<f64>; 5]> {
    if width < 2 || height < 2 {
        return Err(Error::invalid(format!("image must be at least 2x2 pixels, got {width}x{height}")));
    }
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    Ok([
        cal.pixel_to_probe(0.0, 0.0),
        cal.pixel_to_probe(w, 0.0),
        cal.pixel_to_probe(0.0, h),
        cal.pixel_to_probe(w, h),
        cal.pixel_to_probe(w / 2.0, h / 2.0),
    ])
}

fn check_lengths(gt: &Trajectory, pred: &Trajectory, min: usize) -> Result<()> {
    if gt.len() != pred.len() {
        return Err(Error::invalid(format!("trajectory lengths differ: {} vs {}", gt.len(), pred.len())));
    }
    if gt.len() < min {
        return Err(Error::invalid(format!("metric needs at least {min} frames, got {}", gt.len())));
    }
    Ok(())
}

fn mean_point_error(pairs: impl Iterator<Item = (Pose, Pose)>, points: &[Vector3<f64>; 5]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in pairs {
        for p in points {
            sum += (a.transform_point(p) - b.transform_point(p)).norm();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Mean distance (mm) of the five image points under true vs predicted poses.
pub fn global_point_error(gt: &Trajectory, pred: &Trajectory, cal: &Calibration, width: usize, height: usize) -> Result<f64> {
    check_lengths(gt, pred, 1)?;
    let pts = frame_points(cal, width, height)?;
    Ok(mean_point_error(gt.poses().iter().copied().zip(pred.poses().iter().copied()), &pts))
}

/// Mean distance (micrometres) of the five image points under true vs
/// predicted adjacent-frame transforms.
pub fn local_point_error(gt: &Trajectory, pred: &Trajectory, cal: &Calibration, width: usize, height: usize) -> Result<f64> {
    check_lengths(gt, pred, 2)?;
    let pts = frame_points(cal, width, height)?;
    let pairs = gt.poses().windows(2).zip(pred.poses().windows(2)).map(|(g, p)| {
        (relative_transform(&g[0], &g[1]), relative_transform(&p[0], &p[1]))
    });
    Ok(mean_point_error(pairs, &pts) * MM_TO_UM)
}

/// Final position error as a percentage of the start-to-end distance.
pub fn final_drift_rate(gt: &Trajectory, pred: &Trajectory) -> Result<f64> {
    check_lengths(gt, pred, 2)?;
    let distance = (gt.last().translation() - gt.first().translation()).norm();
    if distance <= MIN_SCAN_DISTANCE_MM {
        return Err(Error::DegenerateScan(format!("start-to-end distance {distance:e} mm is too small")));
    }
    Ok(100.0 * (pred.last().translation() - gt.last().translation()).norm() / distance)
}

/// Per-frame translational drift (mm) and its maximum.
pub fn max_drift(gt: &Trajectory, pred: &Trajectory) -> Result<(f64, Vec<f64>)> {
    check_lengths(gt, pred, 1)?;
    let series: Vec<f64> =
        gt.poses().iter().zip(pred.poses()).map(|(a, b)| (a.translation() - b.translation()).norm()).collect();
    Ok((series.iter().copied().fold(0.0, f64::max), series))
}

/// All four metrics after rebasing both trajectories to their first pose.
pub fn evaluate(gt: &Trajectory, pred: &Trajectory, cal: &Calibration, width: usize, height: usize) -> Result<MetricsReport> {
    let gt = rebase_trajectory(gt);
    let pred = rebase_trajectory(pred);
    let (max_drift_mm, per_frame_drift_mm) = max_drift(&gt, &pred)?;
    Ok(MetricsReport {
        gpe_mm: global_point_error(&gt, &pred, cal, width, height)?,
        lpe_um: local_point_error(&gt, &pred, cal, width, height)?,
        fdr_percent: final_drift_rate(&gt, &pred)?,
        max_drift_mm,
        per_frame_drift_mm,
    })
}

impl MetricsReport {
    pub fn is_valid(&self) -> bool {
        let scalars = [self.gpe_mm, self.lpe_um, self.fdr_percent, self.max_drift_mm];
        scalars.iter().chain(&self.per_frame_drift_mm).all(|v| v.is_finite() && *v >= 0.0)
            && self.per_frame_drift_mm.iter().copied().fold(0.0, f64::max) == self.max_drift_mm
    }
}

/// Column-wise mean of a set of reports (per-frame series are not averaged).
pub fn mean_report(reports: &[MetricsReport]) -> Option<[f64; 4]> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let mut acc = [0.0; 4];
    for r in reports {
        acc[0] += r.gpe_mm;
        acc[1] += r.lpe_um;
        acc[2] += r.fdr_percent;
        acc[3] += r.max_drift_mm;
    }
    Some(acc.map(|v| v / n))
}
