//! Static scene: a checkered table, one two-colour convex object and a flat
//! background. The world is z-up with the table top at `z = 0`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{Intrinsics, Pose};

pub type Rgb = [f32; 3];

pub const BACKGROUND: Rgb = [0.30, 0.34, 0.40];
pub const TABLE_LIGHT: Rgb = [0.78, 0.66, 0.50];
pub const TABLE_DARK: Rgb = [0.62, 0.50, 0.36];
pub const HAND: Rgb = [1.0, 0.0, 1.0];

/// Object colour pairs; none is close to magenta, wood or the background.
pub const PALETTE: [(Rgb, Rgb); 4] = [
    ([0.90, 0.15, 0.10], [0.95, 0.85, 0.15]),
    ([0.10, 0.35, 0.90], [0.95, 0.55, 0.10]),
    ([0.10, 0.70, 0.25], [0.95, 0.95, 0.95]),
    ([0.10, 0.75, 0.80], [0.10, 0.10, 0.10]),
];

/// Horizontal field of view of the head camera.
pub const FOV_DEG: f64 = 60.0;
pub const CYLINDER_SIDES: usize = 12;

/// Axis-aligned table rectangle at height 0 with a square checker.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Table {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub square: f64,
}

impl Table {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        p.x >= self.x.0 && p.x <= self.x.1 && p.y >= self.y.0 && p.y <= self.y.1
    }

    pub fn color(&self, p: &Vector3<f64>) -> Rgb {
        let i = (p.x / self.square).floor() as i64 + (p.y / self.square).floor() as i64;
        if i.rem_euclid(2) == 0 {
            TABLE_LIGHT
        } else {
            TABLE_DARK
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Half extents along the local axes.
    Box { half: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
}

impl Shape {
    pub fn height(&self) -> f64 {
        match *self {
            Shape::Box { half } => 2.0 * half[2],
            Shape::Cylinder { height, .. } => height,
        }
    }
}

/// Rigid object pose: base centre on or above the table and yaw about +z.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectPose {
    pub position: Vector3<f64>,
    pub yaw: f64,
}

impl ObjectPose {
    pub fn rotation(&self) -> Matrix3<f64> {
        *Rotation3::from_axis_angle(&Vector3::z_axis(), self.yaw).matrix()
    }

    pub fn to_world(&self, local: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * local + self.position
    }

    pub fn to_local(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * (world - self.position)
    }

    /// Geometric centre, half the height above the base.
    pub fn centre(&self, shape: &Shape) -> Vector3<f64> {
        self.position + Vector3::new(0.0, 0.0, shape.height() / 2.0)
    }
}

/// Planar face with outward normal; vertices counter-clockwise seen from outside.
#[derive(Clone, Debug, PartialEq)]
pub struct Face {
    pub vertices: Vec<Vector3<f64>>,
    pub normal: Vector3<f64>,
    pub color: Rgb,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub colors: (Rgb, Rgb),
}

impl ObjectSpec {
    /// Faces in object-local coordinates. Tops take the first colour, sides
    /// alternate, bottoms take the second.
    pub fn local_faces(&self) -> Vec<Face> {
        let (a, b) = self.colors;
        let ring: Vec<(f64, f64)> = match self.shape {
            Shape::Box { half } => vec![
                (-half[0], -half[1]),
                (half[0], -half[1]),
                (half[0], half[1]),
                (-half[0], half[1]),
            ],
            Shape::Cylinder { radius, .. } => (0..CYLINDER_SIDES)
                .map(|i| {
                    let th = 2.0 * PI * i as f64 / CYLINDER_SIDES as f64;
                    (radius * th.cos(), radius * th.sin())
                })
                .collect(),
        };
        let h = self.shape.height();
        let n = ring.len();
        let mut faces = Vec::with_capacity(n + 2);
        faces.push(Face {
            vertices: ring.iter().map(|&(x, y)| Vector3::new(x, y, h)).collect(),
            normal: Vector3::z(),
            color: a,
        });
        faces.push(Face {
            vertices: ring.iter().rev().map(|&(x, y)| Vector3::new(x, y, 0.0)).collect(),
            normal: -Vector3::z(),
            color: b,
        });
        for i in 0..n {
            let (p, q) = (ring[i], ring[(i + 1) % n]);
            let out = Vector3::new(q.1 - p.1, p.0 - q.0, 0.0).normalize();
            faces.push(Face {
                vertices: vec![
                    Vector3::new(p.0, p.1, 0.0),
                    Vector3::new(q.0, q.1, 0.0),
                    Vector3::new(q.0, q.1, h),
                    Vector3::new(p.0, p.1, h),
                ],
                normal: out,
                color: if i % 2 == 0 { a } else { b },
            });
        }
        faces
    }

    pub fn world_faces(&self, pose: &ObjectPose) -> Vec<Face> {
        let r = pose.rotation();
        self.local_faces()
            .into_iter()
            .map(|f| Face {
                vertices: f.vertices.iter().map(|v| pose.to_world(v)).collect(),
                normal: r * f.normal,
                color: f.color,
            })
            .collect()
    }

    /// Distance from a world point to the solid, 0 inside.
    pub fn surface_distance(&self, pose: &ObjectPose, p: &Vector3<f64>) -> f64 {
        let l = pose.to_local(p);
        let h = self.shape.height();
        let dz = (l.z - h).max(-l.z).max(0.0);
        match self.shape {
            Shape::Box { half } => {
                let dx = (l.x.abs() - half[0]).max(0.0);
                let dy = (l.y.abs() - half[1]).max(0.0);
                (dx * dx + dy * dy + dz * dz).sqrt()
            }
            Shape::Cylinder { radius, .. } => {
                let dr = ((l.x * l.x + l.y * l.y).sqrt() - radius).max(0.0);
                (dr * dr + dz * dz).sqrt()
            }
        }
    }

    pub fn vertices(&self, pose: &ObjectPose) -> Vec<Vector3<f64>> {
        self.world_faces(pose).into_iter().flat_map(|f| f.vertices).collect()
    }
}

/// Camera-to-world pose looking from `eye` towards `target`, image x right
/// and y down, no roll relative to world +z.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Pose {
    let f = (target - eye).normalize();
    let right = f.cross(&Vector3::z()).normalize();
    let down = f.cross(&right);
    Pose {
        r: Matrix3::from_columns(&[right, down, f]),
        t: eye,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub table: Table,
    pub background: Rgb,
    pub object: ObjectSpec,
    pub object_pose: ObjectPose,
    /// Head camera eye and look-at target at the first frame.
    pub eye: Vector3<f64>,
    pub target: Vector3<f64>,
}

impl SceneSpec {
    pub fn first_pose(&self) -> Pose {
        look_at(self.eye, self.target)
    }
}

pub const DEFAULT_TABLE: Table = Table {
    x: (-0.6, 0.6),
    y: (0.0, 1.0),
    square: 0.08,
};

fn sample_object<R: Rng>(rng: &mut R) -> ObjectSpec {
    let colors = PALETTE[rng.random_range(0..PALETTE.len())];
    let shape = if rng.random_bool(0.5) {
        Shape::Box {
            half: [
                rng.random_range(0.055..0.08),
                rng.random_range(0.03..0.05),
                rng.random_range(0.03..0.05),
            ],
        }
    } else {
        Shape::Cylinder {
            radius: rng.random_range(0.045..0.065),
            height: rng.random_range(0.06..0.10),
        }
    };
    ObjectSpec { shape, colors }
}

/// True when every object vertex projects at least one pixel inside the
/// image of side `size`.
pub fn object_in_view(object: &ObjectSpec, pose: &ObjectPose, cam: &Pose, k: &Intrinsics, size: usize) -> bool {
    let inv = cam.inverse();
    object.vertices(pose).iter().all(|v| match k.project(&inv.apply(v)) {
        Some((u, w)) => u >= 1.0 && w >= 1.0 && u <= size as f64 - 2.0 && w <= size as f64 - 2.0,
        None => false,
    })
}

/// Deterministic scene for `seed`. Placement is resampled until the object
/// is fully visible at the reference resolution and reachable by the arm.
pub fn generate_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let object = sample_object(&mut rng);
    let eye = Vector3::new(
        rng.random_range(-0.03..0.03),
        rng.random_range(-0.08..-0.02),
        rng.random_range(0.48..0.54),
    );
    let target = Vector3::new(rng.random_range(-0.03..0.03), 0.45, 0.0);
    let cam = look_at(eye, target);
    let k = Intrinsics::from_fov(32, FOV_DEG);
    let arm = super::arm::ArmSpec::default();
    let mut object_pose = ObjectPose {
        position: Vector3::new(0.0, 0.45, 0.0),
        yaw: 0.0,
    };
    for _ in 0..64 {
        let cand = ObjectPose {
            position: Vector3::new(rng.random_range(-0.10..0.10), rng.random_range(0.38..0.50), 0.0),
            yaw: rng.random_range(0.0..PI),
        };
        let grasp = cand.position + Vector3::new(0.0, 0.0, object.shape.height() + super::arm::GRASP_LIFT);
        if object_in_view(&object, &cand, &cam, &k, 32) && arm.reachable(&grasp) {
            object_pose = cand;
            break;
        }
    }
    SceneSpec {
        seed,
        table: DEFAULT_TABLE,
        background: BACKGROUND,
        object,
        object_pose,
        eye,
        target,
    }
}
