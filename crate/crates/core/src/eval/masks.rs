//! Object integrity: mask centroids, position error and moment-based
//! orientation error.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Minimum area and anisotropy for a usable orientation.
pub const MIN_AREA: usize = 20;
pub const MIN_ANISOTROPY: f64 = 0.15;
const EPS: f64 = 1e-12;

/// Binary image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskFrame {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl MaskFrame {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape("mask", format!("{} values for {h}x{w}", data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![false; h * w] }
    }

    /// Threshold a `[H, W]` or `[1, H, W]` tensor at 0.5.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [h, w] | [1, h, w] => (h, w),
            _ => return Err(Error::shape("mask", format!("expected [H, W] or [1, H, W], got {:?}", t.shape()))),
        };
        Self::new(h, w, t.data().iter().map(|v| *v > 0.5).collect())
    }

    /// Frame `i` of a `[T, 1, H, W]` stack.
    pub fn from_stack(t: &Tensor<f32>, i: usize) -> Result<Self> {
        let [n, 1, h, w] = *t.shape() else {
            return Err(Error::shape("mask", format!("expected [T, 1, H, W], got {:?}", t.shape())));
        };
        if i >= n {
            return Err(Error::Invalid(format!("frame {i} of {n}")));
        }
        Self::new(h, w, t.data()[i * h * w..(i + 1) * h * w].iter().map(|v| *v > 0.5).collect())
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, v)| **v)
            .map(|(i, _)| ((i % self.w) as f64, (i / self.w) as f64))
    }
}

/// Mean foreground `(x, y)` with x the column and y the row; `None` when empty.
pub fn mask_centroid(m: &MaskFrame) -> Option<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (x, y) in m.points() {
        sx += x;
        sy += y;
        n += 1;
    }
    (n > 0).then(|| (sx / n as f64, sy / n as f64))
}

/// Centroid distance over the image diagonal; 0 when both masks are empty
/// and 1 when exactly one is.
pub fn ope(gt: &MaskFrame, gen: &MaskFrame) -> Result<f64> {
    if (gt.h, gt.w) != (gen.h, gen.w) {
        return Err(Error::shape("ope", format!("{}x{} vs {}x{}", gt.h, gt.w, gen.h, gen.w)));
    }
    Ok(match (mask_centroid(gt), mask_centroid(gen)) {
        (None, None) => 0.0,
        (None, Some(_)) | (Some(_), None) => 1.0,
        (Some(a), Some(b)) => {
            let diag = ((gt.h * gt.h + gt.w * gt.w) as f64).sqrt();
            ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() / diag
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientationEstimate {
    /// Principal-axis angle in `(−π/2, π/2]`.
    pub theta: f64,
    /// `(λ₁ − λ₂) / (λ₁ + λ₂ + ε)`.
    pub alpha: f64,
    pub area: usize,
    pub valid: bool,
}

/// Orientation and anisotropy from second-order central moments.
pub fn mask_orientation(m: &MaskFrame) -> OrientationEstimate {
    let Some((cx, cy)) = mask_centroid(m) else {
        return OrientationEstimate {
            theta: 0.0,
            alpha: 0.0,
            area: 0,
            valid: false,
        };
    };
    let (mut m20, mut m02, mut m11, mut n) = (0.0, 0.0, 0.0, 0usize);
    for (x, y) in m.points() {
        let (dx, dy) = (x - cx, y - cy);
        m20 += dx * dx;
        m02 += dy * dy;
        m11 += dx * dy;
        n += 1;
    }
    let a = n as f64;
    let (m20, m02, m11) = (m20 / a, m02 / a, m11 / a);
    let theta = 0.5 * (2.0 * m11).atan2(m20 - m02);
    let half_tr = 0.5 * (m20 + m02);
    let disc = (0.25 * (m20 - m02).powi(2) + m11 * m11).sqrt();
    let (l1, l2) = (half_tr + disc, half_tr - disc);
    let alpha = (l1 - l2) / (l1 + l2 + EPS);
    OrientationEstimate {
        theta,
        alpha,
        area: n,
        valid: n >= MIN_AREA && alpha >= MIN_ANISOTROPY,
    }
}

/// Axis difference folded into `[0, π/2]`, in degrees.
pub fn fold_angle_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).abs().rem_euclid(PI);
    d.min(PI - d).to_degrees()
}

/// Orientation error in degrees; `None` unless both masks pass the gate.
pub fn ooe(gt: &MaskFrame, gen: &MaskFrame) -> Option<f64> {
    let (a, b) = (mask_orientation(gt), mask_orientation(gen));
    (a.valid && b.valid).then(|| fold_angle_deg(a.theta, b.theta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(h: usize, w: usize, x0: usize, y0: usize, bw: usize, bh: usize) -> MaskFrame {
        let mut m = MaskFrame::empty(h, w);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                m.set(x, y, true);
            }
        }
        m
    }

    #[test]
    fn centroid_cases() {
        assert_eq!(mask_centroid(&block(10, 10, 3, 7, 1, 1)), Some((3.0, 7.0)));
        assert_eq!(mask_centroid(&block(10, 10, 0, 0, 2, 2)), Some((0.5, 0.5)));
        assert_eq!(mask_centroid(&MaskFrame::empty(4, 4)), None);
    }

    #[test]
    fn ope_cases() {
        let a = block(48, 64, 10, 10, 1, 1);
        let b = block(48, 64, 13, 14, 1, 1);
        assert!((ope(&a, &b).unwrap() - 0.0625).abs() < 1e-15);
        assert_eq!(ope(&a, &a).unwrap(), 0.0);
        assert_eq!(ope(&a, &MaskFrame::empty(48, 64)).unwrap(), 1.0);
        assert_eq!(ope(&MaskFrame::empty(48, 64), &a).unwrap(), 1.0);
        assert_eq!(ope(&MaskFrame::empty(48, 64), &MaskFrame::empty(48, 64)).unwrap(), 0.0);
        assert!(ope(&a, &MaskFrame::empty(4, 4)).is_err());
    }

    #[test]
    fn orientation_cases() {
        let bar = block(8, 32, 2, 3, 20, 1);
        let o = mask_orientation(&bar);
        assert_eq!(o.theta, 0.0);
        assert!(o.valid);
        let vbar = block(32, 8, 3, 2, 1, 20);
        assert!((mask_orientation(&vbar).theta - PI / 2.0).abs() < 1e-12);
        let mut disk = MaskFrame::empty(21, 21);
        for y in 0..21 {
            for x in 0..21 {
                if (x as f64 - 10.0).powi(2) + (y as f64 - 10.0).powi(2) <= 64.0 {
                    disk.set(x, y, true);
                }
            }
        }
        let d = mask_orientation(&disk);
        assert!(d.alpha < MIN_ANISOTROPY && !d.valid);
        let short = block(8, 32, 2, 3, 19, 1);
        assert!(!mask_orientation(&short).valid);
    }

    #[test]
    fn ooe_cases() {
        let h = block(32, 32, 2, 3, 20, 1);
        let v = block(32, 32, 3, 2, 1, 20);
        assert_eq!(ooe(&h, &h), Some(0.0));
        assert!((ooe(&h, &v).unwrap() - 90.0).abs() < 1e-12);
        assert!((fold_angle_deg(170f64.to_radians(), 10f64.to_radians()) - 20.0).abs() < 1e-9);
        assert_eq!(ooe(&h, &MaskFrame::empty(32, 32)), None);
    }
}
