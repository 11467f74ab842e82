//! Colour-based pixel classification of rendered or generated frames, the
//! magenta hand detector and the hand-fidelity metrics built on it.

use super::masks::MaskFrame;
use crate::error::{Error, Result};
use crate::synth::raster::{LABEL_BACKGROUND, LABEL_HAND, LABEL_OBJECT, LABEL_TABLE};
use crate::synth::scene::{Rgb, SceneSpec, HAND, TABLE_DARK, TABLE_LIGHT};
use crate::tensor::Tensor;

/// Euclidean RGB distance to pure magenta accepted as hand.
pub const HAND_TOLERANCE: f32 = 0.35;
/// Pixels needed for a frame to count as a hand detection.
pub const HAND_MIN_PIXELS: usize = 20;

fn frame_dims(frame: &Tensor<f32>) -> Result<(usize, usize)> {
    match *frame.shape() {
        [3, h, w] => Ok((h, w)),
        _ => Err(Error::shape("frame", format!("expected [3, H, W], got {:?}", frame.shape()))),
    }
}

fn pixel(frame: &Tensor<f32>, plane: usize, i: usize) -> Rgb {
    let d = frame.data();
    [d[i], d[plane + i], d[2 * plane + i]]
}

fn dist2(a: Rgb, b: Rgb) -> f32 {
    (0..3).map(|c| (a[c] - b[c]).powi(2)).sum()
}

pub fn is_hand_color(p: Rgb) -> bool {
    dist2(p, HAND) <= HAND_TOLERANCE * HAND_TOLERANCE
}

/// Magenta pixels of a `[3, H, W]` frame.
pub fn detect_hand(frame: &Tensor<f32>) -> Result<MaskFrame> {
    let (h, w) = frame_dims(frame)?;
    let plane = h * w;
    MaskFrame::new(h, w, (0..plane).map(|i| is_hand_color(pixel(frame, plane, i))).collect())
}

pub fn hand_detected(frame: &Tensor<f32>) -> Result<bool> {
    Ok(detect_hand(frame)?.area() >= HAND_MIN_PIXELS)
}

/// Nearest scene colour per pixel, as raster labels.
pub fn classify(frame: &Tensor<f32>, scene: &SceneSpec) -> Result<Vec<u8>> {
    let (h, w) = frame_dims(frame)?;
    let plane = h * w;
    let refs = [
        (scene.background, LABEL_BACKGROUND),
        (TABLE_LIGHT, LABEL_TABLE),
        (TABLE_DARK, LABEL_TABLE),
        (scene.object.colors.0, LABEL_OBJECT),
        (scene.object.colors.1, LABEL_OBJECT),
        (HAND, LABEL_HAND),
    ];
    Ok((0..plane)
        .map(|i| {
            let p = pixel(frame, plane, i);
            let mut best = (f32::INFINITY, LABEL_BACKGROUND);
            for (c, l) in refs {
                let d = dist2(p, c);
                if d < best.0 {
                    best = (d, l);
                }
            }
            best.1
        })
        .collect())
}

/// Object mask of a generated frame by nearest scene colour.
pub fn object_mask(frame: &Tensor<f32>, scene: &SceneSpec) -> Result<MaskFrame> {
    let (h, w) = frame_dims(frame)?;
    MaskFrame::new(h, w, classify(frame, scene)?.into_iter().map(|l| l == LABEL_OBJECT).collect())
}

/// `1 − valid detections / ground-truth instances`; `None` without instances.
pub fn missing_ratio(gt_present: &[bool], detected: &[bool]) -> Result<Option<f64>> {
    if gt_present.len() != detected.len() {
        return Err(Error::shape("missing_ratio", format!("{} vs {}", gt_present.len(), detected.len())));
    }
    let n = gt_present.iter().filter(|p| **p).count();
    if n == 0 {
        return Ok(None);
    }
    let hit = gt_present.iter().zip(detected).filter(|(p, d)| **p && **d).count();
    Ok(Some(1.0 - hit as f64 / n as f64))
}

/// RMSE between two aligned `[T, 1, H, W]` segmentation stacks.
pub fn seg_rmse(gt: &Tensor<f32>, gen: &Tensor<f32>) -> Result<f64> {
    if gt.shape() != gen.shape() || gt.rank() != 4 || gt.shape()[1] != 1 {
        return Err(Error::shape("seg_rmse", format!("{:?} vs {:?}", gt.shape(), gen.shape())));
    }
    if gt.is_empty() {
        return Err(Error::Invalid("seg_rmse of empty sequences".into()));
    }
    let sse: f64 = gt.data().iter().zip(gen.data()).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
    Ok((sse / gt.len() as f64).sqrt())
}
