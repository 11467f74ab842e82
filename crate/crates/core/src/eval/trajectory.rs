//! Ego-motion consistency: ATE after similarity alignment, and per-step
//! relative rotation and translation errors (step 1, mean aggregation).

use crate::camera::{umeyama_align, Pose, Similarity};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryErrors {
    /// RMSE of aligned positions.
    pub ate: f64,
    /// Mean relative rotation error, degrees.
    pub rre: f64,
    /// Mean relative translation error, in the reference's units.
    pub rpe: f64,
    pub alignment: Similarity,
}

/// Errors of `est` against `gt`, both camera-to-reference pose lists.
pub fn trajectory_errors(est: &[Pose], gt: &[Pose]) -> Result<TrajectoryErrors> {
    if est.len() != gt.len() || est.is_empty() {
        return Err(Error::shape("trajectory_errors", format!("{} vs {} poses", est.len(), gt.len())));
    }
    let pe: Vec<_> = est.iter().map(|p| p.t).collect();
    let pg: Vec<_> = gt.iter().map(|p| p.t).collect();
    let sim = umeyama_align(&pe, &pg)?;
    let ate = (sim.residual(&pe, &pg) / est.len() as f64).sqrt();
    let aligned: Vec<Pose> = est
        .iter()
        .map(|p| Pose {
            r: sim.r * p.r,
            t: sim.apply(&p.t),
        })
        .collect();
    let steps = est.len().saturating_sub(1);
    let (mut rre, mut rpe) = (0.0, 0.0);
    for i in 0..steps {
        let rel_g = gt[i].inverse().compose(&gt[i + 1]);
        let rel_e = aligned[i].inverse().compose(&aligned[i + 1]);
        let err = rel_g.inverse().compose(&rel_e);
        rre += err.angle().to_degrees();
        rpe += err.t.norm();
    }
    let n = steps.max(1) as f64;
    Ok(TrajectoryErrors {
        ate,
        rre: rre / n,
        rpe: rpe / n,
        alignment: sim,
    })
}
