//! Trajectory estimates, per-sweep reports and aggregate summaries.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::dataset::Sweep;
use crate::error::{Error, Result};
use crate::geometry::{compose_trajectory, rebase_trajectory, Pose, PoseParams, Trajectory};
use crate::metrics::{evaluate, mean_report, MetricsReport};

/// Relative-pose estimates of one sweep and the trajectory they compose
/// to, starting from the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEstimate {
    pub sweep_id: String,
    pub variant: String,
    /// SHA-256 of the checkpoint file, or a `baseline:` label.
    pub model: String,
    pub relparams: Vec<[f64; 6]>,
    /// Row-major 4x4 poses.
    pub composed: Vec<[f64; 16]>,
}

impl TrajectoryEstimate {
    pub fn new(sweep_id: &str, variant: &str, model: &str, rel: &[PoseParams]) -> Result<Self> {
        let traj = compose_trajectory(rel, &Pose::IDENTITY)?;
        Ok(Self {
            sweep_id: sweep_id.to_string(),
            variant: variant.to_string(),
            model: model.to_string(),
            relparams: rel.iter().map(PoseParams::to_array).collect(),
            composed: traj.poses().iter().map(Pose::to_row_major).collect(),
        })
    }

    pub fn relatives(&self) -> Vec<PoseParams> {
        self.relparams.iter().map(|&a| PoseParams::from_array(a)).collect()
    }

    pub fn trajectory(&self) -> Result<Trajectory> {
        Trajectory::new(self.composed.iter().map(|m| Pose::from_row_major(m)).collect::<Result<_>>()?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("estimate serialises");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let est: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Schema { path: path.to_path_buf(), reason: e.to_string() })?;
        if est.composed.len() != est.relparams.len() + 1 {
            return Err(Error::Schema { path: path.to_path_buf(), reason: "composed and relparams lengths disagree".into() });
        }
        Ok(est)
    }
}

/// Fixed predictors used as references.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    /// Every relative transform is the identity.
    Zero,
    /// The true relative transforms.
    GroundTruth,
}

impl Baseline {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "ground-truth" => Ok(Self::GroundTruth),
            other => Err(Error::invalid(format!("unknown baseline {other:?} (expected zero or ground-truth)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Zero => "zero",
            Self::GroundTruth => "ground-truth",
        }
    }

    pub fn predict(self, sweep: &Sweep) -> Vec<PoseParams> {
        match self {
            Self::Zero => vec![PoseParams::ZERO; sweep.len() - 1],
            Self::GroundTruth => sweep.poses.adjacent_relatives(),
        }
    }
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Metrics of an estimate against the sweep's ground truth.
pub fn report(sweep: &Sweep, est: &TrajectoryEstimate) -> Result<MetricsReport> {
    if est.composed.len() != sweep.len() {
        return Err(Error::invalid(format!(
            "estimate has {} poses but sweep {} has {} frames",
            est.composed.len(),
            sweep.id,
            sweep.len()
        )));
    }
    evaluate(&sweep.poses, &est.trajectory()?, &sweep.cal, sweep.width(), sweep.height())
}

/// Elevational (probe z) displacement of each frame relative to the first
/// frame's probe coordinates.
pub fn out_of_plane_series(traj: &Trajectory) -> Vec<f64> {
    rebase_trajectory(traj).translations().iter().map(|t| t.z).collect()
}

pub const METRIC_HEADERS: [&str; 4] = ["GPE (mm)", "LPE (um)", "FDR (%)", "Max drift (mm)"];

/// Mean of each metric per labelled group, as a plain-text table.
pub fn summary_text(rows: &[(String, Vec<MetricsReport>)]) -> String {
    let mut out = format!("{:<16} {:>6} {:>10} {:>10} {:>10} {:>15}\n", "model", "sweeps", "GPE (mm)", "LPE (um)", "FDR (%)", "Max drift (mm)");
    for (label, reports) in rows {
        match mean_report(reports) {
            Some(m) => out.push_str(&format!(
                "{label:<16} {:>6} {:>10.3} {:>10.2} {:>10.2} {:>15.3}\n",
                reports.len(),
                m[0],
                m[1],
                m[2],
                m[3]
            )),
            None => out.push_str(&format!("{label:<16} {:>6}\n", 0)),
        }
    }
    out
}

pub fn summary_csv(rows: &[(String, Vec<MetricsReport>)]) -> String {
    let mut out = String::from("model,sweeps,gpe_mm,lpe_um,fdr_percent,max_drift_mm\n");
    for (label, reports) in rows {
        if let Some(m) = mean_report(reports) {
            out.push_str(&format!("{label},{},{},{},{},{}\n", reports.len(), m[0], m[1], m[2], m[3]));
        }
    }
    out
}
