use rand::Rng;

use super::Sweep;
use crate::error::{Error, Result};
use crate::geometry::{matrix_to_params, relative_transform, PoseParams, Trajectory};

/// One sampled subsequence with its regression targets.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsequenceRow {
    /// `L x h x w`, row-major.
    pub frames: Vec<f32>,
    pub height: usize,
    pub width: usize,
    /// Absolute frame positions in the source sweep, strictly increasing.
    pub frame_indices: Vec<usize>,
    /// Relative parameters between consecutive sampled frames.
    pub targets: Vec<PoseParams>,
}

impl SubsequenceRow {
    pub fn len(&self) -> usize {
        self.frame_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_indices.is_empty()
    }
}

/// Rows of equal length stacked into a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsequenceBatch {
    pub rows: Vec<SubsequenceRow>,
}

impl SubsequenceBatch {
    pub fn new(rows: Vec<SubsequenceRow>) -> Result<Self> {
        if let Some(first) = rows.first() {
            let shape = (first.len(), first.height, first.width);
            if rows.iter().any(|r| (r.len(), r.height, r.width) != shape) {
                return Err(Error::invalid("batch rows differ in shape"));
            }
        }
        Ok(Self { rows })
    }

    /// `B x L x h x w` frames, flattened.
    pub fn frames(&self) -> Vec<f32> {
        self.rows.iter().flat_map(|r| r.frames.iter().copied()).collect()
    }

    /// `B x (L-1) x 6` targets, flattened.
    pub fn targets(&self) -> Vec<f64> {
        self.rows.iter().flat_map(|r| r.targets.iter().flat_map(|p| p.to_array())).collect()
    }
}

/// `matrix_to_params(T[idx_k]^-1 T[idx_k+1])` for consecutive indices.
pub fn relative_targets(traj: &Trajectory, indices: &[usize]) -> Vec<PoseParams> {
    let poses = traj.poses();
    indices.windows(2).map(|w| matrix_to_params(&relative_transform(&poses[w[0]], &poses[w[1]])).params).collect()
}

/// Area-averaging resize of one `h x w` image to `oh x ow`. Each output
/// pixel is the overlap-weighted mean of the input pixels it covers.
pub fn area_downsample(img: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    assert_eq!(img.len(), h * w, "area_downsample: buffer size");
    assert!(oh > 0 && ow > 0 && oh <= h && ow <= w, "area_downsample: {h}x{w} -> {oh}x{ow}");
    let rows = area_weights(h, oh);
    let cols = area_weights(w, ow);
    let mut tmp = vec![0.0f64; h * ow];
    for y in 0..h {
        for (ox, taps) in cols.iter().enumerate() {
            tmp[y * ow + ox] = taps.iter().map(|&(x, wt)| img[y * w + x] as f64 * wt).sum();
        }
    }
    let mut out = vec![0.0f32; oh * ow];
    for (oy, taps) in rows.iter().enumerate() {
        for ox in 0..ow {
            out[oy * ow + ox] = taps.iter().map(|&(y, wt)| tmp[y * ow + ox] * wt).sum::<f64>() as f32;
        }
    }
    out
}

fn area_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n as f64 / m as f64;
    (0..m)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut taps = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < n {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((i, overlap / scale));
                }
                i += 1;
            }
            taps
        })
        .collect()
}

/// Frames at `indices`, optionally resized to `resolution = (h, w)`.
pub fn gather_frames(sweep: &Sweep, indices: &[usize], resolution: Option<(usize, usize)>) -> (Vec<f32>, usize, usize) {
    let (h, w) = resolution.unwrap_or((sweep.height(), sweep.width()));
    let mut out = Vec::with_capacity(indices.len() * h * w);
    for &i in indices {
        if (h, w) == (sweep.height(), sweep.width()) {
            out.extend_from_slice(sweep.frame(i));
        } else {
            out.extend(area_downsample(sweep.frame(i), sweep.height(), sweep.width(), h, w));
        }
    }
    (out, h, w)
}

fn row(sweep: &Sweep, indices: Vec<usize>, resolution: Option<(usize, usize)>) -> SubsequenceRow {
    let (frames, height, width) = gather_frames(sweep, &indices, resolution);
    let targets = relative_targets(&sweep.poses, &indices);
    SubsequenceRow { frames, height, width, frame_indices: indices, targets }
}

/// Contiguous window of `length` frames at a uniformly drawn start, full
/// resolution.
pub fn sample_local_subsequence(sweep: &Sweep, length: usize, rng: &mut impl Rng) -> Result<SubsequenceRow> {
    if length < 2 || length > sweep.len() {
        return Err(Error::invalid(format!("window length {length} invalid for a sweep of {} frames", sweep.len())));
    }
    let start = rng.gen_range(0..=sweep.len() - length);
    Ok(row(sweep, (start..start + length).collect(), None))
}

/// `count` sorted frame indices drawn uniformly without replacement, frames
/// area-downsampled to `resolution`.
pub fn sample_global_subsequence(
    sweep: &Sweep,
    count: usize,
    resolution: (usize, usize),
    rng: &mut impl Rng,
) -> Result<SubsequenceRow> {
    if count < 2 || count > sweep.len() {
        return Err(Error::invalid(format!("cannot draw {count} frames from a sweep of {}", sweep.len())));
    }
    let mut indices = rand::seq::index::sample(rng, sweep.len(), count).into_vec();
    indices.sort_unstable();
    Ok(row(sweep, indices, Some(resolution)))
}

/// `0, stride, 2*stride, ...` plus the last frame when not already present.
pub fn subsample_evenly(num_frames: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    if num_frames == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..num_frames).step_by(stride).collect();
    if *idx.last().expect("non-empty") != num_frames - 1 {
        idx.push(num_frames - 1);
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsample_rules() {
        assert_eq!(subsample_evenly(5, 1), vec![0, 1, 2, 3, 4]);
        assert_eq!(subsample_evenly(17, 8), vec![0, 8, 16]);
        assert_eq!(subsample_evenly(20, 8), vec![0, 8, 16, 19]);
        assert_eq!(subsample_evenly(64, 64), vec![0, 63]);
        assert_eq!(subsample_evenly(1, 8), vec![0]);
    }

    #[test]
    fn area_downsample_integer_factor_is_block_mean() {
        let img: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let out = area_downsample(&img, 4, 4, 2, 2);
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn area_downsample_preserves_mean_and_constants() {
        let img: Vec<f32> = (0..35).map(|v| (v as f32 * 0.37).sin().abs()).collect();
        let out = area_downsample(&img, 5, 7, 3, 4);
        assert_eq!(out.len(), 12);
        let mean_in: f64 = img.iter().map(|&v| v as f64).sum::<f64>() / 35.0;
        let mean_out: f64 = out.iter().map(|&v| v as f64).sum::<f64>() / 12.0;
        assert!((mean_in - mean_out).abs() < 1e-6);
        let flat = area_downsample(&[0.25; 35], 5, 7, 3, 4);
        assert!(flat.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }
}
