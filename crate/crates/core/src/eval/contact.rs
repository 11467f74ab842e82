//! Contact consistency: while the ground truth holds the object, the
//! generated object should move with the hand.

use super::masks::{mask_centroid, MaskFrame};
use crate::camera::{Intrinsics, Pose};
use nalgebra::Vector3;

/// Pixel position of each world point in its frame's camera.
pub fn project_points(world_poses: &[Pose], k: &Intrinsics, points: &[Vector3<f64>]) -> Vec<Option<(f64, f64)>> {
    world_poses
        .iter()
        .zip(points)
        .map(|(cam, p)| k.project(&cam.inverse().apply(p)))
        .collect()
}

/// Sample Pearson correlation; `None` for fewer than two samples or zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Correlation between generated object-centroid displacement and
/// projected end-effector displacement, both measured from the first
/// attached frame. x and y components are pooled as samples.
pub fn contact_correlation(gen_masks: &[MaskFrame], ee_px: &[Option<(f64, f64)>], attached: &[bool]) -> Option<f64> {
    let n = gen_masks.len().min(ee_px.len()).min(attached.len());
    let usable = |i: usize| -> Option<((f64, f64), (f64, f64))> {
        if !attached[i] {
            return None;
        }
        Some((mask_centroid(&gen_masks[i])?, ee_px[i]?))
    };
    let mut anchor = None;
    let (mut dc, mut de) = (Vec::new(), Vec::new());
    for i in 0..n {
        let Some((c, e)) = usable(i) else { continue };
        match anchor {
            None => anchor = Some((c, e)),
            Some((c0, e0)) => {
                dc.extend([c.0 - c0.0, c.1 - c0.1]);
                de.extend([e.0 - e0.0, e.1 - e0.1]);
            }
        }
    }
    pearson(&dc, &de)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_cases() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), None);
    }
}
