//! Per-clip metric evaluation and the CSV / key=value report.

use std::fmt::{self, Write as _};

use super::contact::{contact_correlation, project_points};
use super::frame::{psnr, ssim};
use super::hands::{detect_hand, missing_ratio, object_mask, HAND_MIN_PIXELS};
use super::masks::{ooe, ope, MaskFrame};
use super::pose::{estimate_trajectory, PoseSearch};
use super::trajectory::trajectory_errors;
use crate::camera::Trajectory;
use crate::error::{Error, Result};
use crate::synth::{generate_scene, Clip};
use crate::tensor::Tensor;

/// A report cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Metric {
    Value(f64),
    /// Undefined for this input, e.g. no valid frames.
    NotApplicable,
    /// Not computed by this implementation or skipped by option.
    NotComputed,
}

impl Metric {
    pub fn from_option(v: Option<f64>) -> Self {
        v.map_or(Metric::NotApplicable, Metric::Value)
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(*v),
            _ => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Value(v) => write!(f, "{v:.6}"),
            Metric::NotApplicable => f.write_str("na"),
            Metric::NotComputed => f.write_str("nc"),
        }
    }
}

/// CSV columns in order. `lpips`, `object_clip` and `mpjpe` need pretrained
/// networks and are always `nc`.
pub const COLUMNS: [&str; 16] = [
    "clip",
    "psnr",
    "ssim",
    "lpips",
    "object_clip",
    "ope",
    "ooe",
    "ooe_valid_ratio",
    "ate",
    "rre",
    "rpe",
    "mr",
    "mpjpe",
    "seg_rmse",
    "contact_r",
    "pose_flagged",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ClipMetrics {
    pub name: String,
    /// Metric cells for `COLUMNS[1..]`.
    pub values: Vec<Metric>,
}

impl ClipMetrics {
    pub fn get(&self, column: &str) -> Option<Metric> {
        let i = COLUMNS.iter().position(|c| *c == column)?;
        (i > 0).then(|| self.values[i - 1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Run the brute-force pose search for ATE / RRE / RPE.
    pub poses: bool,
    pub search: PoseSearch,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            poses: true,
            search: PoseSearch::default(),
        }
    }
}

fn frame_of(t: &Tensor<f32>, i: usize) -> Result<Tensor<f32>> {
    let [_, c, h, w] = *t.shape() else {
        return Err(Error::shape("frame", format!("expected [L, C, H, W], got {:?}", t.shape())));
    };
    let per = c * h * w;
    Tensor::from_vec(&[c, h, w], t.data()[i * per..(i + 1) * per].to_vec())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Every metric of one generated clip against its ground truth.
pub fn evaluate_clip(name: &str, gt: &Clip, pred_rgb: &Tensor<f32>, opts: &EvalOptions) -> Result<ClipMetrics> {
    if pred_rgb.shape() != gt.rgb.shape() {
        return Err(Error::shape("evaluate", format!("prediction {:?} vs ground truth {:?}", pred_rgb.shape(), gt.rgb.shape())));
    }
    let n = gt.len();
    let scene = generate_scene(gt.seed);
    let (s, hw) = (gt.size, gt.size * gt.size);

    let (mut ps, mut ss, mut opes, mut ooes) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut gen_masks, mut present, mut detected) = (Vec::new(), Vec::new(), Vec::new());
    let mut gen_hands = Vec::with_capacity(n * hw);
    for i in 0..n {
        let (g, p) = (frame_of(&gt.rgb, i)?, frame_of(pred_rgb, i)?);
        ps.push(psnr(&g, &p)?);
        ss.push(ssim(&g, &p)?);
        let m_gt = MaskFrame::from_stack(&gt.object_masks, i)?;
        let m_gen = object_mask(&p, &scene)?;
        opes.push(ope(&m_gt, &m_gen)?);
        if let Some(e) = ooe(&m_gt, &m_gen) {
            ooes.push(e);
        }
        gen_masks.push(m_gen);
        let hand_gt = MaskFrame::from_stack(&gt.hand_maps, i)?;
        let hand_gen = detect_hand(&p)?;
        present.push(hand_gt.area() >= HAND_MIN_PIXELS);
        detected.push(hand_gen.area() >= HAND_MIN_PIXELS);
        gen_hands.extend(hand_gen.data.iter().map(|b| if *b { 1.0f32 } else { 0.0 }));
    }
    let gen_hands = Tensor::from_vec(&[n, 1, s, s], gen_hands)?;
    let seg = super::hands::seg_rmse(&gt.hand_maps, &gen_hands)?;
    let mr = missing_ratio(&present, &detected)?;

    let (ate, rre, rpe, flagged) = if opts.poses {
        let est_gt = estimate_trajectory(&gt.rgb, &scene, &gt.intrinsics, &gt.world_poses[0], &opts.search)?;
        let est_pred = estimate_trajectory(pred_rgb, &scene, &gt.intrinsics, &gt.world_poses[0], &opts.search)?;
        let flagged = est_pred.iter().filter(|e| !e.reliable).count();
        let rel = |v: &[super::pose::PoseEstimate]| -> Result<Trajectory> {
            Trajectory::from_world(&v.iter().map(|e| e.pose).collect::<Vec<_>>())
        };
        let e = trajectory_errors(rel(&est_pred)?.poses(), rel(&est_gt)?.poses())?;
        (Metric::Value(e.ate), Metric::Value(e.rre), Metric::Value(e.rpe), Metric::Value(flagged as f64))
    } else {
        (Metric::NotComputed, Metric::NotComputed, Metric::NotComputed, Metric::NotComputed)
    };

    let ee_px = project_points(&gt.world_poses, &gt.intrinsics, &gt.end_effector);
    let contact = contact_correlation(&gen_masks, &ee_px, &gt.attached);

    let values = vec![
        Metric::Value(mean(&ps)),
        Metric::Value(mean(&ss)),
        Metric::NotComputed,
        Metric::NotComputed,
        Metric::Value(mean(&opes)),
        Metric::from_option((!ooes.is_empty()).then(|| mean(&ooes))),
        Metric::Value(ooes.len() as f64 / n as f64),
        ate,
        rre,
        rpe,
        Metric::from_option(mr),
        Metric::NotComputed,
        Metric::Value(seg),
        Metric::from_option(contact),
        flagged,
    ];
    Ok(ClipMetrics {
        name: name.to_string(),
        values,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub clips: Vec<ClipMetrics>,
}

impl MetricReport {
    /// Column-wise mean over clips with a value; `na` when none has one and
    /// `nc` when none computed it.
    pub fn macro_row(&self) -> ClipMetrics {
        let cols = COLUMNS.len() - 1;
        let values = (0..cols)
            .map(|j| {
                let vals: Vec<f64> = self.clips.iter().filter_map(|c| c.values[j].value()).collect();
                if !vals.is_empty() {
                    Metric::Value(mean(&vals))
                } else if self.clips.iter().all(|c| c.values[j] == Metric::NotComputed) {
                    Metric::NotComputed
                } else {
                    Metric::NotApplicable
                }
            })
            .collect();
        ClipMetrics {
            name: "macro".into(),
            values,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = COLUMNS.join(",");
        s.push('\n');
        for row in self.clips.iter().chain(std::iter::once(&self.macro_row())) {
            s.push_str(&row.name);
            for v in &row.values {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Macro values as `key=value` lines plus the conventions used.
    pub fn summary(&self) -> String {
        let m = self.macro_row();
        let mut s = format!("clips={}\n", self.clips.len());
        for (c, v) in COLUMNS[1..].iter().zip(&m.values) {
            let _ = writeln!(s, "{c}={v}");
        }
        s.push_str("rpe_convention=step1_mean\n");
        s.push_str("ooe_units=degrees\n");
        s
    }
}
