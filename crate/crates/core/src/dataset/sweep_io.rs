use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Sweep;
use crate::error::{Error, Result};
use crate::geometry::{matrix_to_params, params_to_matrix, Pose, PoseParams, Trajectory};
use crate::metrics::Calibration;

pub const META_FILE: &str = "meta.json";
pub const FRAMES_FILE: &str = "frames.bin";
pub const POSES_FILE: &str = "poses.csv";
const POSES_HEADER: [&str; 6] = ["tx", "ty", "tz", "rx", "ry", "rz"];

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    id: String,
    /// `[frames, height, width]`
    shape: [usize; 3],
    dtype: String,
    pixel_spacing_mm: [f64; 2],
    image_to_probe: Vec<f64>,
    frames_file: String,
    poses_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    family: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subject: Option<u64>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Poses are written as `tx,ty,tz,rx,ry,rz` where `rx`, `ry`, `rz` are the
/// rotations about x (roll), y (pitch) and z (yaw).
fn poses_csv(traj: &Trajectory) -> String {
    let mut s = POSES_HEADER.join(",");
    s.push('\n');
    for pose in traj.poses() {
        let p = matrix_to_params(pose).params;
        let row = [p.t[0], p.t[1], p.t[2], p.r[2], p.r[1], p.r[0]];
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub fn save_sweep(sweep: &Sweep, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = Meta {
        id: sweep.id.clone(),
        shape: sweep.shape(),
        dtype: "float32".into(),
        pixel_spacing_mm: sweep.cal.pixel_spacing(),
        image_to_probe: sweep.cal.image_to_probe().to_row_major().to_vec(),
        frames_file: FRAMES_FILE.into(),
        poses_file: POSES_FILE.into(),
        family: sweep.family.clone(),
        subject: sweep.subject,
    };
    let json = serde_json::to_string_pretty(&meta).expect("meta serialises");
    write_file(&dir.join(META_FILE), json.as_bytes())?;
    let mut bytes = Vec::with_capacity(sweep.frames().len() * 4);
    for v in sweep.frames() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(&dir.join(FRAMES_FILE), &bytes)?;
    write_file(&dir.join(POSES_FILE), poses_csv(&sweep.poses).as_bytes())
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedMeta { path: path.to_path_buf(), reason: reason.into() }
}

fn schema(path: &Path, reason: impl Into<String>) -> Error {
    Error::Schema { path: path.to_path_buf(), reason: reason.into() }
}

fn read_poses(path: &Path) -> Result<Trajectory> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').map(str::trim).collect();
    if header != POSES_HEADER {
        return Err(schema(path, format!("expected header {}, found {}", POSES_HEADER.join(","), header.join(","))));
    }
    let mut poses = Vec::new();
    for (row, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 6 {
            return Err(schema(path, format!("row {row}: expected 6 columns, found {}", cells.len())));
        }
        let mut v = [0.0f64; 6];
        for (slot, cell) in v.iter_mut().zip(&cells) {
            *slot = cell.trim().parse().map_err(|_| schema(path, format!("row {row}: cannot parse {cell:?}")))?;
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinitePose { path: path.to_path_buf(), row });
        }
        let p = PoseParams::new([v[0], v[1], v[2]], [v[5], v[4], v[3]]);
        poses.push(params_to_matrix(&p)?);
    }
    Trajectory::new(poses).map_err(|_| schema(path, "no pose rows"))
}

pub fn load_sweep(dir: &Path) -> Result<Sweep> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| malformed(&meta_path, e.to_string()))?;
    if meta.dtype != "float32" {
        return Err(malformed(&meta_path, format!("unsupported dtype {:?}", meta.dtype)));
    }
    let [n, h, w] = meta.shape;
    if n < 2 || h == 0 || w == 0 {
        return Err(malformed(&meta_path, format!("invalid shape {:?}", meta.shape)));
    }
    let image_to_probe =
        Pose::from_row_major(&meta.image_to_probe).map_err(|e| malformed(&meta_path, format!("image_to_probe: {e}")))?;
    let cal = Calibration::new(meta.pixel_spacing_mm, image_to_probe).map_err(|e| malformed(&meta_path, e.to_string()))?;

    let frames_path: PathBuf = dir.join(&meta.frames_file);
    let bytes = fs::read(&frames_path).map_err(|e| Error::io(&frames_path, e))?;
    let expected = (n * h * w * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::ShapeMismatch { path: frames_path, expected, actual: bytes.len() as u64 });
    }
    let frames: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();

    let poses_path = dir.join(&meta.poses_file);
    let poses = read_poses(&poses_path)?;
    if poses.len() != n {
        return Err(schema(&poses_path, format!("{} pose rows for {n} frames", poses.len())));
    }
    let mut sweep = Sweep::new(meta.id, meta.shape, frames, poses, cal).map_err(|e| malformed(&meta_path, e.to_string()))?;
    sweep.family = meta.family;
    sweep.subject = meta.subject;
    Ok(sweep)
}
