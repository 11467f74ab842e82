use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// `p ↦ scale · R · p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    /// Set when the source points were collinear or coincident and the
    /// identity was returned instead of a fit.
    pub degenerate: bool,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            r: Matrix3::identity(),
            t: Vector3::zeros(),
            degenerate: false,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.r * p) + self.t
    }

    /// Sum of squared residuals `Σ‖s R e + t - r‖²`.
    pub fn residual(&self, est: &[Vector3<f64>], reference: &[Vector3<f64>]) -> f64 {
        est.iter().zip(reference).map(|(e, r)| (self.apply(e) - r).norm_squared()).sum()
    }
}

/// Closed-form least-squares similarity taking `est` onto `reference`.
pub fn umeyama_align(est: &[Vector3<f64>], reference: &[Vector3<f64>]) -> Result<Similarity> {
    if est.len() != reference.len() {
        return Err(Error::shape("umeyama", format!("{} vs {} points", est.len(), reference.len())));
    }
    let n = est.len();
    if n < 3 {
        return Ok(Similarity { degenerate: true, ..Similarity::identity() });
    }
    let nf = n as f64;
    let mu_e = est.iter().sum::<Vector3<f64>>() / nf;
    let mu_r = reference.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut cov_e = Matrix3::zeros();
    let mut var_e = 0.0;
    for (e, r) in est.iter().zip(reference) {
        let de = e - mu_e;
        cov += (r - mu_r) * de.transpose();
        cov_e += de * de.transpose();
        var_e += de.norm_squared();
    }
    cov /= nf;
    cov_e /= nf;
    var_e /= nf;

    let spread = cov_e.symmetric_eigenvalues();
    let mut ev: Vec<f64> = spread.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let scale_ref = ev[0].max(f64::MIN_POSITIVE);
    if var_e <= 1e-18 || ev[1] / scale_ref < 1e-10 {
        return Ok(Similarity { degenerate: true, ..Similarity::identity() });
    }

    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if u.determinant() * vt.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    let d = Matrix3::from_diagonal(&svd.singular_values);
    let scale = (d * s).trace() / var_e;
    let t = mu_r - scale * (r * mu_e);
    Ok(Similarity {
        scale,
        r,
        t,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Pose;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn cloud(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)))
            .collect()
    }

    #[test]
    fn self_alignment_is_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let pts = cloud(&mut rng, 10);
        let s = umeyama_align(&pts, &pts).unwrap();
        assert!(!s.degenerate);
        assert!((s.scale - 1.0).abs() < 1e-9);
        assert!((s.r - Matrix3::identity()).abs().max() < 1e-9);
        assert!(s.t.norm() < 1e-9);
    }

    #[test]
    fn recovers_similarity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let pts = cloud(&mut rng, 12);
        let g = Pose::from_axis_angle(Vector3::new(0.3, -0.5, 0.8), 1.1, Vector3::new(0.4, 2.0, -1.0));
        let target: Vec<_> = pts.iter().map(|p| 2.0 * (g.r * p) + g.t).collect();
        let s = umeyama_align(&pts, &target).unwrap();
        assert!((s.scale - 2.0).abs() < 1e-6);
        assert!((s.r - g.r).abs().max() < 1e-6);
        assert!((s.t - g.t).norm() < 1e-6);
    }

    #[test]
    fn collinear_is_flagged() {
        let pts: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        let s = umeyama_align(&pts, &pts).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.scale, 1.0);
        let same = vec![Vector3::new(1.0, 1.0, 1.0); 4];
        assert!(umeyama_align(&same, &same).unwrap().degenerate);
    }

    /// The closed form must not be beaten by any similarity on a local grid
    /// around it; on a fine grid the best sampled residual converges to it.
    #[test]
    fn noisy_residual_matches_grid_search() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pts = cloud(&mut rng, 8);
        let g = Pose::from_axis_angle(Vector3::new(0.0, 0.0, 1.0), 0.5, Vector3::new(1.0, -1.0, 0.5));
        let target: Vec<_> = pts
            .iter()
            .map(|p| {
                let n: Vector3<f64> = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
                1.5 * (g.r * p) + g.t + 0.05 * n
            })
            .collect();
        let s = umeyama_align(&pts, &target).unwrap();
        let best = s.residual(&pts, &target);
        // Grid over scale, rotation perturbation (axis-angle) and translation,
        // with translation optimal in closed form for each (s, R).
        let mut grid_best = f64::INFINITY;
        let steps = [-2i32, -1, 0, 1, 2];
        for &ds in &steps {
            for &ax in &steps {
                for &ay in &steps {
                    for &az in &steps {
                        let scale = s.scale + ds as f64 * 2e-3;
                        let dr = Pose::from_axis_angle(Vector3::new(ax as f64, ay as f64, az as f64), 1e-3 * ((ax * ax + ay * ay + az * az) as f64).sqrt(), Vector3::zeros()).r;
                        let r = dr * s.r;
                        let n = pts.len() as f64;
                        let mu_e = pts.iter().sum::<Vector3<f64>>() / n;
                        let mu_r = target.iter().sum::<Vector3<f64>>() / n;
                        let t = mu_r - scale * (r * mu_e);
                        let cand = Similarity { scale, r, t, degenerate: false };
                        grid_best = grid_best.min(cand.residual(&pts, &target));
                    }
                }
            }
        }
        assert!(best <= grid_best + 1e-12);
        assert!((grid_best - best).abs() < 1e-3);
    }
}
