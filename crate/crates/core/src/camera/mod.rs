//! Pinhole intrinsics, first-frame-relative head poses, Plücker ray fields and
//! similarity alignment of camera trajectories.

mod io;
mod plucker;
mod umeyama;

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};

use crate::error::{Error, Result};

pub use io::{read_intrinsics_csv, read_poses_csv, read_trajectory_csv, write_intrinsics_csv, write_poses_csv, write_trajectory_csv};
pub use plucker::{plucker_field, plucker_volume, ray_direction, RayConvention};
pub use umeyama::{umeyama_align, Similarity};

const ORTHO_TOL: f64 = 1e-6;

/// Grid that frame-1-relative poses are snapped to (about 1e-9). Rounding
/// differences from re-expressing the world poses in another frame are far
/// below it, so the snapped poses and every field derived from them do not
/// depend on the world origin.
const POSE_GRID: f64 = 1.0 / (1u64 << 30) as f64;

fn snap(v: f64) -> f64 {
    (v / POSE_GRID).round() * POSE_GRID
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::Invalid(format!("focal lengths must be positive, got ({fx}, {fy})")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Square image of side `size` with the given horizontal field of view.
    pub fn from_fov(size: usize, fov_deg: f64) -> Self {
        let f = size as f64 / 2.0 / (fov_deg.to_radians() / 2.0).tan();
        let c = (size as f64 - 1.0) / 2.0;
        Self { fx: f, fy: f, cx: c, cy: c }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Closed-form inverse of the upper-triangular calibration matrix.
    pub fn inverse(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Pixel coordinates of a camera-frame point, `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        (p.z > 1e-9).then(|| (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }
}

/// Rigid transform mapping camera coordinates into a reference frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    pub fn new(r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self> {
        let p = Self { r, t };
        p.validate()?;
        Ok(p)
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, t: Vector3<f64>) -> Self {
        let r = if axis.norm() == 0.0 {
            Matrix3::identity()
        } else {
            Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner()
        };
        Self { r, t }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.r.iter().chain(self.t.iter()).all(|v| v.is_finite()) {
            return Err(Error::Pose("non-finite entries".into()));
        }
        let err = (self.r.transpose() * self.r - Matrix3::identity()).abs().max();
        if err > ORTHO_TOL {
            return Err(Error::Pose(format!("rotation not orthonormal (|RᵀR - I| = {err:.3e})")));
        }
        let det = self.r.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::Pose(format!("rotation determinant {det}")));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.t);
        m
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            r: self.r * other.r,
            t: self.r * other.t + self.t,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.r.transpose();
        Pose { r: rt, t: -(rt * self.t) }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r * p + self.t
    }

    /// Rotation angle in radians. The atan2 form stays accurate near 0,
    /// where `acos` of the trace loses half the digits.
    pub fn angle(&self) -> f64 {
        let r = &self.r;
        let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() / 2.0;
        let c = (r.trace() - 1.0) / 2.0;
        s.atan2(c)
    }

    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        (self.r - other.r).abs().max().max((self.t - other.t).abs().max())
    }
}

/// Pose of frame `t` expressed in the camera frame of frame 1, given both as
/// camera-to-world maps in a shared world frame.
pub fn relative_pose(pose_t: &Pose, pose_1: &Pose) -> Result<Pose> {
    pose_t.validate()?;
    pose_1.validate()?;
    Ok(pose_1.inverse().compose(pose_t))
}

/// Per-frame head poses relative to frame 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Result<Self> {
        let first = poses.first().ok_or_else(|| Error::Invalid("empty trajectory".into()))?;
        if first.max_abs_diff(&Pose::identity()) > 1e-9 {
            return Err(Error::Pose("first pose must be the identity".into()));
        }
        for p in &poses {
            p.validate()?;
        }
        Ok(Self { poses })
    }

    /// Re-express camera-to-world poses relative to the first one, snapped
    /// to a fixed ~1e-9 grid so the result is independent of the world origin.
    pub fn from_world(world: &[Pose]) -> Result<Self> {
        let first = world.first().ok_or_else(|| Error::Invalid("empty trajectory".into()))?;
        let mut poses = world
            .iter()
            .map(|p| {
                relative_pose(p, first).map(|q| Pose {
                    r: q.r.map(snap),
                    t: q.t.map(snap),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        poses[0] = Pose::identity();
        Self::new(poses)
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.t).collect()
    }
}
