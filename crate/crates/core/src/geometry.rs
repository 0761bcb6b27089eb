//! Rigid transforms, the 6-DoF pose parameterisation and trajectory
//! composition.
//!
//! Convention used everywhere in this crate: translations in millimetres,
//! angles in degrees, rotation `R = Rz(yaw) * Ry(pitch) * Rx(roll)` (Z-Y-X
//! intrinsic). A parameter vector is ordered `[tx, ty, tz, yaw, pitch, roll]`.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `R^T R = I` and `det R = 1` for a valid pose.
pub const ORTHO_TOL: f64 = 1e-9;
/// Pitch distance from +-90 degrees at which decomposition is flagged.
pub const GIMBAL_MARGIN_DEG: f64 = 0.1;

/// Homogeneous 4x4 rigid transform (mm).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    m: Matrix4<f64>,
}

/// Six pose parameters: translation (mm) and Z-Y-X Euler angles (degrees).
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseParams {
    pub t: [f64; 3],
    /// `[yaw (about z), pitch (about y), roll (about x)]`
    pub r: [f64; 3],
}

/// Result of [`matrix_to_params`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decomposition {
    pub params: PoseParams,
    /// Pitch lies within [`GIMBAL_MARGIN_DEG`] of +-90 degrees; yaw and roll
    /// are then not unique (roll is reported as 0).
    pub near_gimbal_lock: bool,
}

impl PoseParams {
    pub const ZERO: PoseParams = PoseParams { t: [0.0; 3], r: [0.0; 3] };

    pub fn new(t: [f64; 3], r: [f64; 3]) -> Self {
        Self { t, r }
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self { t: [v[0], v[1], v[2]], r: [v[3], v[4], v[5]] }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.t[0], self.t[1], self.t[2], self.r[0], self.r[1], self.r[2]]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

fn rot_x(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Nearest rotation matrix in the Frobenius sense (polar factor).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Wraps an angle in degrees into (-180, 180].
fn wrap_deg(a: f64) -> f64 {
    let mut w = a % 360.0;
    if w <= -180.0 {
        w += 360.0;
    } else if w > 180.0 {
        w -= 360.0;
    }
    w
}

impl Pose {
    pub const IDENTITY: Pose = Pose { m: Matrix4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0) };

    /// Validates the rigid-transform invariants.
    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite matrix entry".into()));
        }
        if m[(3, 0)] != 0.0 || m[(3, 1)] != 0.0 || m[(3, 2)] != 0.0 || m[(3, 3)] != 1.0 {
            return Err(Error::InvalidPose("bottom row is not (0, 0, 0, 1)".into()));
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
        let ortho = (r.transpose() * r - Matrix3::identity()).amax();
        if ortho > ORTHO_TOL {
            return Err(Error::InvalidPose(format!("rotation not orthonormal (max |RtR - I| = {ortho:e})")));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidPose(format!("rotation determinant {det} != 1")));
        }
        Ok(Self { m })
    }

    /// Builds a pose from a rotation and translation, projecting the
    /// rotation onto SO(3).
    pub fn from_rt(r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        let r = nearest_rotation(r);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
        Self { m }
    }

    pub fn translation_only(t: [f64; 3]) -> Self {
        let mut m = Matrix4::identity();
        m[(0, 3)] = t[0];
        m[(1, 3)] = t[1];
        m[(2, 3)] = t[2];
        Self { m }
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.m
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.m.fixed_view::<3, 3>(0, 0).into()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.m.fixed_view::<3, 1>(0, 3).into()
    }

    /// Row-major 16 entries.
    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 16 {
            return Err(Error::InvalidPose(format!("expected 16 entries, got {}", v.len())));
        }
        Self::from_matrix(Matrix4::from_row_slice(v))
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation());
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Pose { m }
    }

    /// `self * other`, re-orthonormalised.
    pub fn compose(&self, other: &Pose) -> Pose {
        let m = self.m * other.m;
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
        let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into();
        Pose::from_rt(&r, &t)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        (self.m - other.m).amax()
    }
}

/// Rotation `Rz(yaw) Ry(pitch) Rx(roll)` and translation `t`.
pub fn params_to_matrix(p: &PoseParams) -> Result<Pose> {
    if !p.is_finite() {
        return Err(Error::invalid("pose parameters must be finite"));
    }
    let r = rot_z(p.r[0]) * rot_y(p.r[1]) * rot_x(p.r[2]);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m[(0, 3)] = p.t[0];
    m[(1, 3)] = p.t[1];
    m[(2, 3)] = p.t[2];
    Ok(Pose { m })
}

/// Inverse of [`params_to_matrix`] with a gimbal-proximity flag.
pub fn matrix_to_params(pose: &Pose) -> Decomposition {
    let r = pose.rotation();
    let t = pose.translation();
    let s = (-r[(2, 0)]).clamp(-1.0, 1.0);
    let pitch = s.asin().to_degrees();
    let near_gimbal_lock = 90.0 - pitch.abs() < GIMBAL_MARGIN_DEG;
    let (yaw, roll) = if 90.0 - pitch.abs() < 1e-7 {
        // cos(pitch) ~ 0: only yaw -+ roll is observable
        ((-r[(0, 1)]).atan2(r[(1, 1)]).to_degrees(), 0.0)
    } else {
        (r[(1, 0)].atan2(r[(0, 0)]).to_degrees(), r[(2, 1)].atan2(r[(2, 2)]).to_degrees())
    };
    Decomposition {
        params: PoseParams { t: [t[0], t[1], t[2]], r: [wrap_deg(yaw), pitch, wrap_deg(roll)] },
        near_gimbal_lock,
    }
}

/// `T_i^{-1} T_j`: pose of frame `j` expressed in frame `i`.
pub fn relative_transform(ti: &Pose, tj: &Pose) -> Pose {
    ti.inverse().compose(tj)
}

/// Ordered, non-empty sequence of poses.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::invalid("trajectory must contain at least one pose"));
        }
        Ok(Self { poses })
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn first(&self) -> &Pose {
        &self.poses[0]
    }

    pub fn last(&self) -> &Pose {
        self.poses.last().expect("non-empty")
    }

    pub fn translations(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(Pose::translation).collect()
    }

    /// Relative parameters between consecutive poses.
    pub fn adjacent_relatives(&self) -> Vec<PoseParams> {
        self.poses.windows(2).map(|w| matrix_to_params(&relative_transform(&w[0], &w[1])).params).collect()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Trajectory> {
        let poses = indices
            .iter()
            .map(|&i| self.poses.get(i).copied().ok_or_else(|| Error::invalid(format!("pose index {i} out of range"))))
            .collect::<Result<Vec<_>>>()?;
        Trajectory::new(poses)
    }
}

/// `T_i = T_{i-1} * M(rel[i-1])`, starting from `t0`.
pub fn compose_trajectory(rel: &[PoseParams], t0: &Pose) -> Result<Trajectory> {
    let mut poses = Vec::with_capacity(rel.len() + 1);
    poses.push(*t0);
    for p in rel {
        let step = params_to_matrix(p)?;
        let next = poses.last().expect("non-empty").compose(&step);
        poses.push(next);
    }
    Trajectory::new(poses)
}

/// Re-expresses every pose relative to the first one (`T_0 = I`).
pub fn rebase_trajectory(traj: &Trajectory) -> Trajectory {
    let inv0 = traj.first().inverse();
    let poses = traj.poses.iter().enumerate().map(|(i, p)| if i == 0 { Pose::IDENTITY } else { inv0.compose(p) }).collect();
    Trajectory { poses }
}
