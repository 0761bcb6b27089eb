//! Nearest-voxel compounding of tracked frames into a 3D volume.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::metrics::Calibration;

pub const VOLUME_FILE: &str = "volume.bin";
pub const VOLUME_META: &str = "volume.json";

/// Dense grid, `x` fastest. Voxels no frame pixel landed in are NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub shape: [usize; 3],
    pub spacing_mm: f64,
    pub origin_mm: [f64; 3],
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub shape: [usize; 3],
    pub order: String,
    pub dtype: String,
    pub spacing_mm: f64,
    pub origin_mm: [f64; 3],
    pub fill: String,
    pub data_file: String,
}

impl Volume {
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.shape[1] + j) * self.shape[0] + i
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        Vector3::new(i as f64, j as f64, k as f64) * self.spacing_mm + Vector3::from(self.origin_mm)
    }

    pub fn filled(&self) -> usize {
        self.data.iter().filter(|v| !v.is_nan()).count()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = VolumeMeta {
            shape: self.shape,
            order: "x-fastest".into(),
            dtype: "float32".into(),
            spacing_mm: self.spacing_mm,
            origin_mm: self.origin_mm,
            fill: "nan".into(),
            data_file: VOLUME_FILE.into(),
        };
        let path = dir.join(VOLUME_META);
        std::fs::write(&path, serde_json::to_string_pretty(&meta).expect("meta serialises")).map_err(|e| Error::io(&path, e))?;
        let path = dir.join(VOLUME_FILE);
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        f.write_all(&bytes).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(VOLUME_META);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: VolumeMeta =
            serde_json::from_str(&text).map_err(|e| Error::MalformedMeta { path: path.clone(), reason: e.to_string() })?;
        let path = dir.join(&meta.data_file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = meta.shape.iter().product::<usize>() * 4;
        if bytes.len() != expected {
            return Err(Error::ShapeMismatch { path, expected: expected as u64, actual: bytes.len() as u64 });
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(Self { shape: meta.shape, spacing_mm: meta.spacing_mm, origin_mm: meta.origin_mm, data })
    }
}

/// Splats every pixel of every frame into the nearest voxel (later frames
/// overwrite earlier ones). The grid covers the bounding box of all pixel
/// positions unless `bounds = (origin, shape)` is given.
pub fn compound(
    frames: &[f32],
    [n, h, w]: [usize; 3],
    cal: &Calibration,
    poses: &[Pose],
    spacing_mm: f64,
    bounds: Option<([f64; 3], [usize; 3])>,
) -> Result<Volume> {
    if n == 0 || poses.len() != n || frames.len() != n * h * w {
        return Err(Error::invalid(format!("{} poses and {} samples for {n} frames of {h}x{w}", poses.len(), frames.len())));
    }
    if !(spacing_mm > 0.0 && spacing_mm.is_finite()) {
        return Err(Error::invalid(format!("voxel spacing must be positive, got {spacing_mm}")));
    }
    let mut points = Vec::with_capacity(n * h * w);
    for pose in poses {
        let plane = pose.compose(cal.image_to_probe());
        let [sx, sy] = cal.pixel_spacing();
        for v in 0..h {
            for u in 0..w {
                points.push(plane.transform_point(&Vector3::new(u as f64 * sx, v as f64 * sy, 0.0)));
            }
        }
    }
    let (origin, shape) = match bounds {
        Some(b) => b,
        None => {
            let mut lo = Vector3::repeat(f64::INFINITY);
            let mut hi = Vector3::repeat(f64::NEG_INFINITY);
            for p in &points {
                lo = lo.inf(p);
                hi = hi.sup(p);
            }
            let shape = std::array::from_fn(|a| ((hi[a] - lo[a]) / spacing_mm).round() as usize + 1);
            ([lo.x, lo.y, lo.z], shape)
        }
    };
    let mut vol = Volume { shape, spacing_mm, origin_mm: origin, data: vec![f32::NAN; shape.iter().product()] };
    let o = Vector3::from(origin);
    let mut hits = 0usize;
    for (p, &value) in points.iter().zip(frames) {
        let g = (p - o) / spacing_mm;
        let idx: Vec<i64> = g.iter().map(|c| c.round() as i64).collect();
        if idx.iter().zip(&shape).all(|(&c, &s)| c >= 0 && (c as usize) < s) {
            let i = vol.index(idx[0] as usize, idx[1] as usize, idx[2] as usize);
            vol.data[i] = value;
            hits += 1;
        }
    }
    if hits == 0 {
        return Err(Error::invalid("no frame pixel falls inside the volume bounds"));
    }
    Ok(vol)
}
