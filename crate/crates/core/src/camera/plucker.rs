use nalgebra::Vector3;

use super::{Intrinsics, Pose, Trajectory};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// How a pixel ray is formed from the pose.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RayConvention {
    /// `d = R K⁻¹ [u, v, 1]ᵀ + t`, translation included as written.
    #[default]
    Literal,
    /// `d = R K⁻¹ [u, v, 1]ᵀ`, a pure direction.
    Direction,
}

impl std::str::FromStr for RayConvention {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "literal" => Ok(Self::Literal),
            "direction" => Ok(Self::Direction),
            other => Err(format!("unknown ray convention {other:?} (literal|direction)")),
        }
    }
}

impl std::fmt::Display for RayConvention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Literal => "literal",
            Self::Direction => "direction",
        })
    }
}

/// Ray through pixel centre `(u, v)` for a frame-1-relative pose.
pub fn ray_direction(k: &Intrinsics, pose: &Pose, u: f64, v: f64, convention: RayConvention) -> Vector3<f64> {
    let d = pose.r * (k.inverse() * Vector3::new(u, v, 1.0));
    match convention {
        RayConvention::Literal => d + pose.t,
        RayConvention::Direction => d,
    }
}

/// `[6, H, W]` field with channels `(o × d, d)` and `o` the optical centre.
pub fn plucker_field<T: Real>(k: &Intrinsics, pose: &Pose, h: usize, w: usize, convention: RayConvention) -> Tensor<T> {
    let o = pose.t;
    let plane = h * w;
    let mut data = vec![T::zero(); 6 * plane];
    for v in 0..h {
        for u in 0..w {
            let d = ray_direction(k, pose, u as f64, v as f64, convention);
            let m = o.cross(&d);
            let i = v * w + u;
            for c in 0..3 {
                data[c * plane + i] = T::of(m[c]);
                data[(3 + c) * plane + i] = T::of(d[c]);
            }
        }
    }
    Tensor::raw(vec![6, h, w], data)
}

/// Stacked fields `[6, L, H, W]` for a whole trajectory.
pub fn plucker_volume<T: Real>(k: &Intrinsics, traj: &Trajectory, h: usize, w: usize, convention: RayConvention) -> Result<Tensor<T>> {
    let l = traj.len();
    let plane = h * w;
    let mut data = vec![T::zero(); 6 * l * plane];
    for (t, pose) in traj.poses().iter().enumerate() {
        let f = plucker_field::<T>(k, pose, h, w, convention);
        for c in 0..6 {
            data[(c * l + t) * plane..(c * l + t + 1) * plane].copy_from_slice(&f.data()[c * plane..(c + 1) * plane]);
        }
    }
    Tensor::from_vec(&[6, l, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_k() -> Intrinsics {
        Intrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap()
    }

    #[test]
    fn identity_ray() {
        let d = ray_direction(&unit_k(), &Pose::identity(), 0.0, 0.0, RayConvention::Literal);
        assert_eq!(d, Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn translation_enters_literally() {
        let pose = Pose::from_axis_angle(Vector3::zeros(), 0.0, Vector3::new(1.0, 0.0, 0.0));
        let d = ray_direction(&unit_k(), &pose, 0.0, 0.0, RayConvention::Literal);
        assert_eq!(d, Vector3::new(1.0, 0.0, 1.0));
        let d = ray_direction(&unit_k(), &pose, 0.0, 0.0, RayConvention::Direction);
        assert_eq!(d, Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn ray_matches_explicit_solve() {
        let k = Intrinsics::new(31.0, 29.0, 15.5, 16.0).unwrap();
        let pose = Pose::from_axis_angle(Vector3::new(0.2, 1.0, -0.3), 0.4, Vector3::new(0.1, -0.2, 0.05));
        let kinv = k.matrix().try_inverse().unwrap();
        let want = pose.r * kinv * Vector3::new(7.0, 3.0, 1.0) + pose.t;
        let got = ray_direction(&k, &pose, 7.0, 3.0, RayConvention::Literal);
        assert!((want - got).norm() < 1e-12);
    }

    #[test]
    fn identity_pose_field() {
        let k = Intrinsics::new(10.0, 10.0, 2.0, 2.0).unwrap();
        let f = plucker_field::<f64>(&k, &Pose::identity(), 5, 5, RayConvention::Literal);
        for c in 0..3 {
            assert!(f.data()[c * 25..(c + 1) * 25].iter().all(|&m| m == 0.0));
        }
        let centre: Vec<f64> = (0..6).map(|c| f.at(&[c, 2, 2])).collect();
        assert_eq!(centre, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn translated_moment() {
        let pose = Pose::from_axis_angle(Vector3::zeros(), 0.0, Vector3::new(1.0, 0.0, 0.0));
        let f = plucker_field::<f64>(&unit_k(), &pose, 1, 1, RayConvention::Literal);
        assert_eq!(f.data(), &[0.0, -1.0, 0.0, 1.0, 0.0, 1.0]);
    }
}
