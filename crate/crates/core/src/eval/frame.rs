//! Frame fidelity: PSNR and Gaussian-window SSIM.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reported for identical inputs, where the ratio is unbounded.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_shape(op: &'static str, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10·log10(1/MSE)` for values in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape("psnr", a, b)?;
    if a.is_empty() {
        return Err(Error::Invalid("psnr of empty tensors".into()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, g: &[f64]) -> f64 {
    let (c1, c2) = (K1 * K1, K2 * K2);
    let n = SSIM_WINDOW;
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..n {
                for dx in 0..n {
                    let wgt = g[dy] * g[dx];
                    let i = (y + dy) * w + x + dx;
                    let (p, q) = (a[i], b[i]);
                    ma += wgt * p;
                    mb += wgt * q;
                    saa += wgt * (p * p);
                    sbb += wgt * (q * q);
                    sab += wgt * (p * q);
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * (ma * mb) + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    total / (oh * ow) as f64
}

/// Mean SSIM over valid window positions, averaged over channels.
/// Accepts `[H, W]` or `[C, H, W]`.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (c, h, w) = match *a.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("ssim", format!("expected [H, W] or [C, H, W], got {:?}", a.shape()))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Invalid(format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let g = gaussian_window();
    let plane = h * w;
    let mut acc = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = a.data()[ch * plane..(ch + 1) * plane].iter().map(|v| *v as f64).collect();
        let pb: Vec<f64> = b.data()[ch * plane..(ch + 1) * plane].iter().map(|v| *v as f64).collect();
        acc += ssim_plane(&pa, &pb, h, w, &g);
    }
    Ok(acc / c as f64)
}
