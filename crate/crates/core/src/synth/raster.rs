//! Flat-shaded software rasterizer. Layers are painted back to front:
//! background, table (ray cast), object faces (depth sorted, back faces
//! culled), then the arm capsules on top.

use nalgebra::Vector3;

use super::arm::{ArmSpec, HandState};
use super::scene::{ObjectPose, Rgb, SceneSpec, HAND};
use crate::camera::{Intrinsics, Pose};
use crate::tensor::Tensor;

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_TABLE: u8 = 1;
pub const LABEL_OBJECT: u8 = 2;
pub const LABEL_HAND: u8 = 3;

const NEAR: f64 = 1e-3;

/// Colour and label buffers of one frame, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub size: usize,
    pub rgb: Vec<Rgb>,
    pub labels: Vec<u8>,
}

impl Raster {
    fn new(size: usize, fill: Rgb) -> Self {
        Self {
            size,
            rgb: vec![fill; size * size],
            labels: vec![LABEL_BACKGROUND; size * size],
        }
    }

    /// `[3, S, S]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let n = self.size * self.size;
        let mut data = vec![0.0f32; 3 * n];
        for (i, c) in self.rgb.iter().enumerate() {
            for ch in 0..3 {
                data[ch * n + i] = c[ch];
            }
        }
        Tensor::from_vec(&[3, self.size, self.size], data).expect("raster shape")
    }

    /// `[1, S, S]` indicator of one label.
    pub fn mask(&self, label: u8) -> Tensor<f32> {
        let data = self.labels.iter().map(|&l| if l == label { 1.0 } else { 0.0 }).collect();
        Tensor::from_vec(&[1, self.size, self.size], data).expect("raster shape")
    }
}

/// World-space ray direction through pixel centre `(u, v)`.
pub fn pixel_ray(cam: &Pose, k: &Intrinsics, u: f64, v: f64) -> Vector3<f64> {
    cam.r * Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0)
}

/// Table or background colour seen along a world ray from `origin`.
pub fn trace_static(scene: &SceneSpec, origin: &Vector3<f64>, d: &Vector3<f64>) -> (u8, Rgb) {
    if d.z < -1e-12 {
        let lam = -origin.z / d.z;
        if lam > 0.0 {
            let hit = origin + lam * d;
            if scene.table.contains(&hit) {
                return (LABEL_TABLE, scene.table.color(&hit));
            }
        }
    }
    (LABEL_BACKGROUND, scene.background)
}

/// Table or background colour seen through pixel centre `(u, v)`.
pub fn static_pixel(scene: &SceneSpec, cam: &Pose, k: &Intrinsics, u: f64, v: f64) -> (u8, Rgb) {
    trace_static(scene, &cam.t, &pixel_ray(cam, k, u, v))
}

/// Background and table only.
pub fn render_static(scene: &SceneSpec, cam: &Pose, k: &Intrinsics, size: usize) -> Raster {
    let mut r = Raster::new(size, scene.background);
    for y in 0..size {
        for x in 0..size {
            let (l, c) = static_pixel(scene, cam, k, x as f64, y as f64);
            r.labels[y * size + x] = l;
            r.rgb[y * size + x] = c;
        }
    }
    r
}

/// Keep the part of a camera-space polygon in front of the near plane.
fn clip_near(poly: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let (ina, inb) = (a.z >= NEAR, b.z >= NEAR);
        if ina {
            out.push(a);
        }
        if ina != inb {
            let t = (NEAR - a.z) / (b.z - a.z);
            out.push(a + t * (b - a));
        }
    }
    out
}

fn fill_convex(r: &mut Raster, pts: &[(f64, f64)], label: u8, color: Rgb) {
    if pts.len() < 3 {
        return;
    }
    let s = r.size as f64;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 < 0.0 || y1 < 0.0 || x0 > s - 1.0 || y0 > s - 1.0 {
        return;
    }
    let (xa, xb) = (x0.max(0.0).ceil() as usize, x1.min(s - 1.0).floor() as usize);
    let (ya, yb) = (y0.max(0.0).ceil() as usize, y1.min(s - 1.0).floor() as usize);
    let n = pts.len();
    for y in ya..=yb {
        for x in xa..=xb {
            let (px, py) = (x as f64, y as f64);
            let (mut pos, mut neg) = (false, false);
            for i in 0..n {
                let (ax, ay) = pts[i];
                let (bx, by) = pts[(i + 1) % n];
                let c = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
                pos |= c > 0.0;
                neg |= c < 0.0;
            }
            if !(pos && neg) {
                r.labels[y * r.size + x] = label;
                r.rgb[y * r.size + x] = color;
            }
        }
    }
}

fn draw_object(r: &mut Raster, scene: &SceneSpec, cam: &Pose, k: &Intrinsics, pose: &ObjectPose) {
    let inv = cam.inverse();
    let mut faces: Vec<(f64, Vec<Vector3<f64>>, Rgb)> = scene
        .object
        .world_faces(pose)
        .into_iter()
        .filter(|f| f.normal.dot(&(cam.t - f.vertices[0])) > 0.0)
        .map(|f| {
            let pts: Vec<Vector3<f64>> = f.vertices.iter().map(|v| inv.apply(v)).collect();
            let depth = pts.iter().map(|p| p.z).sum::<f64>() / pts.len() as f64;
            (depth, pts, f.color)
        })
        .collect();
    faces.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (_, pts, color) in faces {
        let clipped = clip_near(&pts);
        let proj: Vec<(f64, f64)> = clipped.iter().filter_map(|p| k.project(p)).collect();
        fill_convex(r, &proj, LABEL_OBJECT, color);
    }
}

/// Squared distance between the ray `t·d, t ≥ 0` and the segment `[a, b]`.
fn ray_segment_dist2(d: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let d1 = d * 100.0;
    let d2 = b - a;
    let r = -a;
    let (aa, e, f) = (d1.dot(&d1), d2.dot(&d2), d2.dot(&r));
    let (c, bb) = (d1.dot(&r), d1.dot(&d2));
    let denom = aa * e - bb * bb;
    let mut s = if denom > 1e-15 {
        ((bb * f - c * e) / denom).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mut t = (bb * s + f) / e;
    if t < 0.0 {
        t = 0.0;
        s = (-c / aa).clamp(0.0, 1.0);
    } else if t > 1.0 {
        t = 1.0;
        s = ((bb - c) / aa).clamp(0.0, 1.0);
    }
    let p = d1 * s;
    let q = a + d2 * t;
    (p - q).norm_squared()
}

fn draw_arm(r: &mut Raster, cam: &Pose, k: &Intrinsics, arm: &ArmSpec, hand: &HandState, color: Rgb) {
    let inv = cam.inverse();
    let j = arm.joints(hand).map(|p| inv.apply(&p));
    let size = r.size;
    for y in 0..size {
        for x in 0..size {
            let d = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
            let hit = (0..3).any(|i| ray_segment_dist2(&d, &j[i], &j[i + 1]) <= arm.radii[i] * arm.radii[i]);
            if hit {
                r.labels[y * size + x] = LABEL_HAND;
                r.rgb[y * size + x] = color;
            }
        }
    }
}

/// Full frame with every layer. `cam` is the camera-to-world pose.
pub fn render(
    scene: &SceneSpec,
    cam: &Pose,
    k: &Intrinsics,
    size: usize,
    object: &ObjectPose,
    hand: Option<(&ArmSpec, &HandState)>,
) -> Raster {
    let mut r = render_static(scene, cam, k, size);
    draw_object(&mut r, scene, cam, k, object);
    if let Some((arm, h)) = hand {
        draw_arm(&mut r, cam, k, arm, h, HAND);
    }
    r
}

/// `[3, S, S]` RGB frame.
pub fn render_frame(
    scene: &SceneSpec,
    cam: &Pose,
    k: &Intrinsics,
    size: usize,
    object: &ObjectPose,
    hand: Option<(&ArmSpec, &HandState)>,
) -> Tensor<f32> {
    render(scene, cam, k, size, object, hand).to_tensor()
}

/// `[1, S, S]` white arm silhouette on a blank canvas.
pub fn render_hand_map(arm: &ArmSpec, hand: &HandState, cam: &Pose, k: &Intrinsics, size: usize) -> Tensor<f32> {
    let mut r = Raster::new(size, [0.0; 3]);
    draw_arm(&mut r, cam, k, arm, hand, [1.0; 3]);
    r.mask(LABEL_HAND)
}
