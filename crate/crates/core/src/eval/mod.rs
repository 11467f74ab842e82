//! Metric suite: frame fidelity, object integrity, hand fidelity,
//! ego-motion consistency and contact, plus the brute-force oracles that
//! stand in for learned estimators.

pub mod contact;
pub mod frame;
pub mod hands;
pub mod masks;
pub mod pose;
pub mod report;
pub mod trajectory;

pub use contact::{contact_correlation, pearson, project_points};
pub use frame::{psnr, ssim, PSNR_CAP};
pub use hands::{classify, detect_hand, hand_detected, missing_ratio, object_mask, seg_rmse, HAND_MIN_PIXELS};
pub use masks::{fold_angle_deg, mask_centroid, mask_orientation, ooe, ope, MaskFrame, OrientationEstimate};
pub use pose::{estimate_pose_bruteforce, estimate_trajectory, PoseEstimate, PoseSearch};
pub use report::{evaluate_clip, ClipMetrics, EvalOptions, Metric, MetricReport, COLUMNS};
pub use trajectory::{trajectory_errors, TrajectoryErrors};
