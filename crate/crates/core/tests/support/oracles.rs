//! Independent brute-force references for the mask and trajectory metrics.
//! Everything is recomputed from a row-major `Vec<Vec<bool>>` grid with exact
//! integer moment sums, so no code is shared with the library.

use std::f64::consts::PI;

use egowm::camera::Pose;
use egowm::eval::MaskFrame;
use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::Rng;

pub type Grid = Vec<Vec<bool>>;

/// Random mask: a union of filled ellipses and rectangles plus sparse noise.
/// Roughly one in twelve masks is empty.
pub fn random_grid(r: &mut impl Rng, h: usize, w: usize) -> Grid {
    let mut g = vec![vec![false; w]; h];
    if r.random_range(0..12) == 0 {
        return g;
    }
    for _ in 0..r.random_range(1..=3) {
        let (cx, cy) = (r.random_range(0.0..w as f64), r.random_range(0.0..h as f64));
        let (a, b) = (r.random_range(1.0..w as f64 / 2.5), r.random_range(1.0..h as f64 / 2.5));
        let phi = r.random_range(0.0..PI);
        let rect = r.random_bool(0.4);
        let (c, s) = (phi.cos(), phi.sin());
        for (y, row) in g.iter_mut().enumerate() {
            for (x, px) in row.iter_mut().enumerate() {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let (u, v) = ((c * dx + s * dy) / a, (-s * dx + c * dy) / b);
                let inside = if rect { u.abs() <= 1.0 && v.abs() <= 1.0 } else { u * u + v * v <= 1.0 };
                *px |= inside;
            }
        }
    }
    for row in g.iter_mut() {
        for px in row.iter_mut() {
            if r.random_bool(0.01) {
                *px = !*px;
            }
        }
    }
    g
}

pub fn to_mask(g: &Grid) -> MaskFrame {
    let (h, w) = (g.len(), g[0].len());
    MaskFrame::new(h, w, g.iter().flatten().copied().collect()).unwrap()
}

/// Exact integer moment sums `(n, Σx, Σy, Σx², Σy², Σxy)`.
fn sums(g: &Grid) -> [i128; 6] {
    let mut s = [0i128; 6];
    for (y, row) in g.iter().enumerate() {
        for (x, &on) in row.iter().enumerate() {
            if on {
                let (x, y) = (x as i128, y as i128);
                s[0] += 1;
                s[1] += x;
                s[2] += y;
                s[3] += x * x;
                s[4] += y * y;
                s[5] += x * y;
            }
        }
    }
    s
}

pub fn centroid(g: &Grid) -> Option<(f64, f64)> {
    let s = sums(g);
    (s[0] > 0).then(|| (s[1] as f64 / s[0] as f64, s[2] as f64 / s[0] as f64))
}

pub fn ope(a: &Grid, b: &Grid) -> f64 {
    let (h, w) = (a.len() as f64, a[0].len() as f64);
    match (centroid(a), centroid(b)) {
        (None, None) => 0.0,
        (Some(_), None) | (None, Some(_)) => 1.0,
        (Some(p), Some(q)) => (p.0 - q.0).hypot(p.1 - q.1) / h.hypot(w),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Orientation {
    pub theta: f64,
    pub alpha: f64,
    pub area: usize,
    pub valid: bool,
}

/// Principal axis from the eigenvector of the covariance matrix, built from
/// `n²·μ` computed exactly in integers.
pub fn orientation(g: &Grid) -> Orientation {
    let [n, sx, sy, sxx, syy, sxy] = sums(g);
    if n == 0 {
        return Orientation {
            theta: 0.0,
            alpha: 0.0,
            area: 0,
            valid: false,
        };
    }
    let nn = (n * n) as f64;
    let a = (n * sxx - sx * sx) as f64 / nn;
    let c = (n * syy - sy * sy) as f64 / nn;
    let b = (n * sxy - sx * sy) as f64 / nn;
    let half_gap = ((a - c) / 2.0).hypot(b);
    let l1 = (a + c) / 2.0 + half_gap;
    let l2 = (a + c) / 2.0 - half_gap;
    // Eigenvector of the larger eigenvalue; pick the better-conditioned form.
    let (vx, vy) = if a >= c { (l1 - c, b) } else { (b, l1 - a) };
    let mut theta = if vx == 0.0 && vy == 0.0 { 0.0 } else { vy.atan2(vx) };
    while theta > PI / 2.0 {
        theta -= PI;
    }
    while theta <= -PI / 2.0 {
        theta += PI;
    }
    let alpha = (l1 - l2) / (l1 + l2 + 1e-12);
    let area = n as usize;
    Orientation {
        theta,
        alpha,
        area,
        valid: area >= 20 && alpha >= 0.15,
    }
}

/// Axis difference folded into `[0°, 90°]` by repeated subtraction.
pub fn fold_deg(a: f64, b: f64) -> f64 {
    let mut d = (a - b).abs();
    while d >= PI {
        d -= PI;
    }
    d.min(PI - d) * 180.0 / PI
}

pub fn ooe(a: &Grid, b: &Grid) -> Option<f64> {
    let (p, q) = (orientation(a), orientation(b));
    (p.valid && q.valid).then(|| fold_deg(p.theta, q.theta))
}

/// Smallest difference between two axis angles modulo π.
pub fn axis_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

/// Smooth random camera-to-world trajectory.
pub fn random_trajectory(r: &mut impl Rng, n: usize) -> Vec<Pose> {
    let axis = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
    let vel = Vector3::new(r.random_range(-0.1..0.1), r.random_range(-0.1..0.1), r.random_range(-0.1..0.1));
    let acc = Vector3::new(r.random_range(-0.02..0.02), r.random_range(-0.02..0.02), r.random_range(-0.02..0.02));
    let rate = r.random_range(0.01..0.1);
    (0..n)
        .map(|i| {
            let t = i as f64;
            Pose::from_axis_angle(axis, rate * t, vel * t + acc * t * t)
        })
        .collect()
}

/// Apply a global similarity `x ↦ s·R·x + t` to every pose.
pub fn similarity_copy(poses: &[Pose], s: f64, rot: &Matrix3<f64>, t: &Vector3<f64>) -> Vec<Pose> {
    poses
        .iter()
        .map(|p| Pose {
            r: rot * p.r,
            t: s * (rot * p.t) + t,
        })
        .collect()
}

/// Trajectory whose every relative step equals the ground-truth step followed
/// by an extra rotation of `deg` degrees about `axis`.
pub fn perturbed_steps(gt: &[Pose], axis: Vector3<f64>, deg: f64) -> Vec<Pose> {
    let q = Pose {
        r: Rotation3::from_axis_angle(&Unit::new_normalize(axis), deg.to_radians()).into_inner(),
        t: Vector3::zeros(),
    };
    let mut out = vec![gt[0]];
    for i in 0..gt.len() - 1 {
        let step = gt[i].inverse().compose(&gt[i + 1]).compose(&q);
        let next = out[i].compose(&step);
        out.push(next);
    }
    out
}

/// Worst disagreement between library and oracle over `count` random mask
/// pairs: centroid, OPE, anisotropy, validity, well-conditioned axis angles
/// and OOE. Gate disagreements count as infinite error.
pub fn mask_oracle_worst(count: usize, seed: u64) -> f64 {
    use egowm::eval::{mask_centroid, mask_orientation, ooe as lib_ooe, ope as lib_ope};
    use rand::SeedableRng;
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let (h, w) = (r.random_range(8..=40), r.random_range(8..=40));
        let (ga, gb) = (random_grid(&mut r, h, w), random_grid(&mut r, h, w));
        let (ma, mb) = (to_mask(&ga), to_mask(&gb));
        for (g, m) in [(&ga, &ma), (&gb, &mb)] {
            match (centroid(g), mask_centroid(m)) {
                (None, None) => {}
                (Some(p), Some(q)) => worst = worst.max((p.0 - q.0).abs()).max((p.1 - q.1).abs()),
                _ => return f64::INFINITY,
            }
            let (o, e) = (orientation(g), mask_orientation(m));
            if o.valid != e.valid || o.area != e.area {
                return f64::INFINITY;
            }
            worst = worst.max((o.alpha - e.alpha).abs());
            // The axis is only defined when the covariance is anisotropic.
            if o.alpha > 1e-3 {
                worst = worst.max(axis_diff(o.theta, e.theta));
            }
        }
        worst = worst.max((ope(&ga, &gb) - lib_ope(&ma, &mb).unwrap()).abs());
        match (ooe(&ga, &gb), lib_ooe(&ma, &mb)) {
            (None, None) => {}
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            _ => return f64::INFINITY,
        }
    }
    worst
}
