//! Camera pose recovery by exhaustive local grid search: re-render the known
//! static scene (table and background) under every candidate pose and keep
//! the one with the lowest pixel MSE. Pixels that look like the object or
//! the hand in the observed frame are left out of the comparison.

use nalgebra::{Rotation3, Vector3};

use super::hands::classify;
use crate::camera::{Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::par;
use crate::synth::raster::{trace_static, LABEL_BACKGROUND, LABEL_TABLE};
use crate::synth::scene::SceneSpec;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSearch {
    /// Coarse rotation step per axis, radians.
    pub rot_step: f64,
    /// Coarse translation step per axis, metres.
    pub trans_step: f64,
    /// Grid spans `−half_steps..=half_steps` steps per degree of freedom.
    pub half_steps: i32,
    /// Refinement passes after the coarse one, each shrinking the step by `shrink`.
    pub refinements: u32,
    pub shrink: f64,
    /// Per-channel MSE above which the optimum is flagged unreliable.
    pub mse_threshold: f64,
}

impl Default for PoseSearch {
    fn default() -> Self {
        Self {
            rot_step: 1f64.to_radians(),
            trans_step: 0.01,
            half_steps: 3,
            refinements: 1,
            shrink: 3.0,
            mse_threshold: 5e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub mse: f64,
    /// Pixels used in the comparison.
    pub pixels: usize,
    pub reliable: bool,
}

fn offsets(half: i32) -> Vec<[i32; 3]> {
    let mut v = Vec::new();
    for a in -half..=half {
        for b in -half..=half {
            for c in -half..=half {
                v.push([a, b, c]);
            }
        }
    }
    v
}

/// Minimum-MSE pose on the local grid around `guess` (camera-to-world).
pub fn estimate_pose_bruteforce(
    frame: &Tensor<f32>,
    scene: &SceneSpec,
    k: &Intrinsics,
    guess: &Pose,
    search: &PoseSearch,
) -> Result<PoseEstimate> {
    let [3, h, w] = *frame.shape() else {
        return Err(Error::shape("estimate_pose", format!("expected [3, H, W], got {:?}", frame.shape())));
    };
    let plane = h * w;
    let labels = classify(frame, scene)?;
    let d = frame.data();
    let mut rays = Vec::new();
    let mut colors = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        if *l == LABEL_BACKGROUND || *l == LABEL_TABLE {
            let (u, v) = ((i % w) as f64, (i / w) as f64);
            rays.push(Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0));
            colors.push([d[i] as f64, d[plane + i] as f64, d[2 * plane + i] as f64]);
        }
    }
    if rays.is_empty() {
        return Ok(PoseEstimate {
            pose: *guess,
            mse: f64::INFINITY,
            pixels: 0,
            reliable: false,
        });
    }

    let grid = offsets(search.half_steps);
    let mut centre = *guess;
    let mut best_sse = f64::INFINITY;
    let (mut rs, mut ts) = (search.rot_step, search.trans_step);
    for _ in 0..=search.refinements {
        let c = centre;
        // Exact per-rotation minimum; the bound stays local so the result
        // does not depend on scheduling.
        let per_rot = par::map_range(grid.len(), |ri| {
            let o = grid[ri];
            let omega = Vector3::new(o[0] as f64, o[1] as f64, o[2] as f64) * rs;
            let r = c.r * Rotation3::new(omega).into_inner();
            let dirs: Vec<Vector3<f64>> = rays.iter().map(|v| r * v).collect();
            let mut best = (f64::INFINITY, 0usize);
            for (ti, to) in grid.iter().enumerate() {
                let t = c.t + Vector3::new(to[0] as f64, to[1] as f64, to[2] as f64) * ts;
                let mut sse = 0.0;
                for (dir, obs) in dirs.iter().zip(&colors) {
                    let (_, col) = trace_static(scene, &t, dir);
                    sse += (col[0] as f64 - obs[0]).powi(2) + (col[1] as f64 - obs[1]).powi(2) + (col[2] as f64 - obs[2]).powi(2);
                    if sse >= best.0 {
                        break;
                    }
                }
                if sse < best.0 {
                    best = (sse, ti);
                }
            }
            (best, r)
        });
        let mut level_best = (f64::INFINITY, c);
        for ((sse, ti), r) in per_rot {
            if sse < level_best.0 {
                let to = grid[ti];
                let t = c.t + Vector3::new(to[0] as f64, to[1] as f64, to[2] as f64) * ts;
                level_best = (sse, Pose { r, t });
            }
        }
        best_sse = level_best.0;
        centre = level_best.1;
        rs /= search.shrink;
        ts /= search.shrink;
    }
    let mse = best_sse / (3 * rays.len()) as f64;
    Ok(PoseEstimate {
        pose: centre,
        mse,
        pixels: rays.len(),
        reliable: mse <= search.mse_threshold,
    })
}

/// Chain estimates through a clip: frame 0 is taken as known and each
/// later frame starts from the previous estimate.
pub fn estimate_trajectory(
    frames: &Tensor<f32>,
    scene: &SceneSpec,
    k: &Intrinsics,
    first: &Pose,
    search: &PoseSearch,
) -> Result<Vec<PoseEstimate>> {
    let [n, 3, h, w] = *frames.shape() else {
        return Err(Error::shape("estimate_trajectory", format!("expected [L, 3, H, W], got {:?}", frames.shape())));
    };
    let per = 3 * h * w;
    let mut out = vec![PoseEstimate {
        pose: *first,
        mse: 0.0,
        pixels: 0,
        reliable: true,
    }];
    for i in 1..n {
        let f = Tensor::from_vec(&[3, h, w], frames.data()[i * per..(i + 1) * per].to_vec())?;
        let prev = out[i - 1].pose;
        out.push(estimate_pose_bruteforce(&f, scene, k, &prev, search)?);
    }
    Ok(out)
}
