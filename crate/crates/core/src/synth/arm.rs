//! Shoulder-anchored stick arm: a yaw joint and three pitch joints driving
//! three capsule segments, plus kinematic grasping.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Rotation3, Vector3};

use super::scene::{ObjectPose, ObjectSpec};

/// Attachment radius around the object surface, metres.
pub const R_GRASP: f64 = 0.02;
/// Height of the end effector above the object top at the grasp point.
pub const GRASP_LIFT: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArmSpec {
    pub shoulder: Vector3<f64>,
    /// Upper arm, forearm, hand.
    pub lengths: [f64; 3],
    /// Capsule radii per segment.
    pub radii: [f64; 3],
    /// Inclusive `(lo, hi)` for yaw and the three pitches.
    pub limits: [(f64, f64); 4],
}

impl Default for ArmSpec {
    fn default() -> Self {
        Self {
            shoulder: Vector3::new(0.18, 0.02, 0.30),
            lengths: [0.30, 0.30, 0.08],
            radii: [0.03, 0.025, 0.018],
            limits: [(-PI, PI), (-FRAC_PI_2, FRAC_PI_2), (-PI, 0.0), (-PI, PI)],
        }
    }
}

/// Joint angles: yaw about +z, then shoulder, elbow and wrist pitch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HandState {
    pub angles: [f64; 4],
}

impl ArmSpec {
    pub fn within_limits(&self, s: &HandState) -> bool {
        s.angles.iter().zip(&self.limits).all(|(a, (lo, hi))| *a >= *lo - 1e-12 && *a <= *hi + 1e-12)
    }

    /// Shoulder, elbow, wrist and end-effector positions.
    pub fn joints(&self, s: &HandState) -> [Vector3<f64>; 4] {
        let [yaw, p1, p2, p3] = s.angles;
        let h = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
        let mut out = [self.shoulder; 4];
        let mut phi = 0.0;
        for (i, d) in [p1, p2, p3].into_iter().enumerate() {
            phi += d;
            out[i + 1] = out[i] + self.lengths[i] * (phi.cos() * h + phi.sin() * Vector3::z());
        }
        out
    }

    pub fn end_effector(&self, s: &HandState) -> Vector3<f64> {
        self.joints(s)[3]
    }

    fn planar(&self, ee: &Vector3<f64>) -> (f64, f64, f64) {
        let wrist = ee + Vector3::new(0.0, 0.0, self.lengths[2]);
        let d = wrist - self.shoulder;
        (d.y.atan2(d.x), (d.x * d.x + d.y * d.y).sqrt(), d.z)
    }

    /// Whether `ik` hits `ee` exactly with the hand pointing straight down.
    pub fn reachable(&self, ee: &Vector3<f64>) -> bool {
        let (_, r, z) = self.planar(ee);
        let dist = (r * r + z * z).sqrt();
        let [l1, l2, _] = self.lengths;
        r > 1e-6 && dist < l1 + l2 - 1e-6 && dist > (l1 - l2).abs() + 1e-6 && self.within_limits(&self.ik(ee))
    }

    /// Elbow-up solution with the last segment vertical. Unreachable targets
    /// are pulled onto the workspace boundary along the shoulder ray.
    pub fn ik(&self, ee: &Vector3<f64>) -> HandState {
        let [l1, l2, _] = self.lengths;
        let (yaw, mut r, mut z) = self.planar(ee);
        let dist = (r * r + z * z).sqrt().max(1e-9);
        let hi = (l1 + l2) * 0.999;
        let lo = (l1 - l2).abs() + 1e-3;
        let clamped = dist.clamp(lo, hi);
        r *= clamped / dist;
        z *= clamped / dist;
        let cos_a = ((l1 * l1 + clamped * clamped - l2 * l2) / (2.0 * l1 * clamped)).clamp(-1.0, 1.0);
        let p1 = z.atan2(r) + cos_a.acos();
        let (er, ez) = (l1 * p1.cos(), l1 * p1.sin());
        let phi2 = (z - ez).atan2(r - er);
        let clip = |v: f64, (lo, hi): (f64, f64)| v.clamp(lo, hi);
        HandState {
            angles: [
                clip(yaw, self.limits[0]),
                clip(p1, self.limits[1]),
                clip(phi2 - p1, self.limits[2]),
                clip(-FRAC_PI_2 - phi2, self.limits[3]),
            ],
        }
    }

    /// Heading of the hand about +z.
    pub fn heading(&self, s: &HandState) -> f64 {
        s.angles[0]
    }
}

/// Rigid attachment of the object to the end-effector frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Attachment {
    /// Object base position relative to the end effector, in the heading frame.
    pub offset: Vector3<f64>,
    pub yaw_offset: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GraspState {
    pub attached: Option<Attachment>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraspEvent {
    Attach,
    Release,
}

impl std::fmt::Display for GraspEvent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GraspEvent::Attach => "attach",
            GraspEvent::Release => "release",
        })
    }
}

fn rot_z(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), a)
}

/// Advance the grasp by one frame. `open` is the scripted release command:
/// while it holds, nothing attaches and any held object is let go and
/// dropped onto the table plane where it was let go.
pub fn simulate_grasp(
    arm: &ArmSpec,
    hand: &HandState,
    object: &ObjectSpec,
    pose: &ObjectPose,
    grasp: &mut GraspState,
    open: bool,
) -> (bool, ObjectPose, Option<GraspEvent>) {
    let ee = arm.end_effector(hand);
    let heading = arm.heading(hand);
    match grasp.attached {
        Some(a) => {
            let mut p = ObjectPose {
                position: ee + rot_z(heading) * a.offset,
                yaw: heading + a.yaw_offset,
            };
            if open {
                grasp.attached = None;
                p.position.z = 0.0;
                return (false, p, Some(GraspEvent::Release));
            }
            (true, p, None)
        }
        None if !open && object.surface_distance(pose, &ee) <= R_GRASP => {
            grasp.attached = Some(Attachment {
                offset: rot_z(-heading) * (pose.position - ee),
                yaw_offset: pose.yaw - heading,
            });
            (true, *pose, Some(GraspEvent::Attach))
        }
        None => (false, *pose, None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::scene::{Shape, PALETTE};

    fn cube() -> ObjectSpec {
        ObjectSpec {
            shape: Shape::Box { half: [0.04, 0.04, 0.04] },
            colors: PALETTE[1],
        }
    }

    #[test]
    fn ik_roundtrips_through_fk() {
        let arm = ArmSpec::default();
        for (x, y, z) in [(0.0, 0.45, 0.1), (-0.1, 0.4, 0.05), (0.1, 0.3, 0.2)] {
            let t = Vector3::new(x, y, z);
            assert!(arm.reachable(&t));
            let s = arm.ik(&t);
            assert!(arm.within_limits(&s));
            assert!((arm.end_effector(&s) - t).norm() < 1e-9);
            let j = arm.joints(&s);
            assert!((j[2] - j[3] - Vector3::new(0.0, 0.0, arm.lengths[2])).norm() < 1e-9);
        }
    }

    #[test]
    fn far_hand_leaves_object() {
        let arm = ArmSpec::default();
        let pose = ObjectPose {
            position: Vector3::new(0.0, 0.45, 0.0),
            yaw: 0.2,
        };
        let hand = arm.ik(&Vector3::new(0.1, 0.3, 0.25));
        let mut g = GraspState::default();
        let (att, p, ev) = simulate_grasp(&arm, &hand, &cube(), &pose, &mut g, false);
        assert!(!att && ev.is_none());
        assert_eq!(p, pose);
    }

    #[test]
    fn attached_object_follows_end_effector() {
        let arm = ArmSpec::default();
        let obj = cube();
        let pose = ObjectPose {
            position: Vector3::new(0.0, 0.45, 0.0),
            yaw: 0.2,
        };
        let mut g = GraspState::default();
        let h0 = arm.ik(&Vector3::new(0.0, 0.45, 0.08 + GRASP_LIFT));
        let (att, p0, ev) = simulate_grasp(&arm, &h0, &obj, &pose, &mut g, false);
        assert!(att && ev == Some(GraspEvent::Attach));
        let ee0 = arm.end_effector(&h0);
        let h1 = arm.ik(&Vector3::new(0.05, 0.42, 0.15));
        let (att, p1, _) = simulate_grasp(&arm, &h1, &obj, &p0, &mut g, false);
        assert!(att);
        let ee1 = arm.end_effector(&h1);
        let d_obj = p1.position - p0.position;
        let d_ee = ee1 - ee0;
        // The offset is purely vertical, so heading changes do not move it.
        assert!((d_obj - d_ee).norm() < 1e-12);
        let (att, p2, ev) = simulate_grasp(&arm, &h1, &obj, &p1, &mut g, true);
        assert!(!att && ev == Some(GraspEvent::Release));
        assert_eq!(p2.position.z, 0.0);
        assert!((p2.position.xy() - p1.position.xy()).norm() < 1e-12);
    }
}
