//! Latent codec: frames to a `[c_lat, T_lat, S/8, S/8]` latent and back.
//!
//! Latent frame 0 encodes frame 0 alone (replicated four times); latent frame
//! `k ≥ 1` encodes frames `4k−3..=4k`. Each group is stacked into 12 channels
//! and passed through a per-frame stride-8 convolution stack. The decoder is
//! a dense map per latent frame back to its four frames.

use rand::Rng;

use crate::autodiff::{Adam, Graph, ParamId, ParamStore, Session, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvLayer, Linear};
use crate::tensor::{LayerSpec, Real, Tensor};

pub const TEMPORAL_STRIDE: usize = 4;
pub const SPATIAL_STRIDE: usize = 8;
const HIDDEN: usize = 32;

/// Latent frame count for `frames` input frames.
pub fn latent_frames(frames: usize) -> usize {
    (frames - 1) / TEMPORAL_STRIDE + 1
}

/// Frame indices feeding latent frame `k`.
pub fn group_indices(k: usize) -> [usize; 4] {
    if k == 0 {
        [0; 4]
    } else {
        let s = TEMPORAL_STRIDE * k - 3;
        [s, s + 1, s + 2, s + 3]
    }
}

/// Encoder layers for frames of size `size`, latent width `c_lat`.
pub fn encoder_chain(c_lat: usize) -> Vec<LayerSpec> {
    let c = 3 * TEMPORAL_STRIDE;
    vec![
        LayerSpec::conv3d(c, HIDDEN, [1, 3, 3], [1, 2, 2], [0, 1, 1]),
        LayerSpec::conv3d(HIDDEN, HIDDEN, [1, 3, 3], [1, 2, 2], [0, 1, 1]),
        LayerSpec::conv3d(HIDDEN, c_lat, [1, 3, 3], [1, 2, 2], [0, 1, 1]),
    ]
}

/// `frames[L, 3, S, S]` regrouped into the `[12, T_lat, S, S]` encoder input.
pub fn group_frames<T: Real>(frames: &Tensor<T>) -> Result<Tensor<T>> {
    let s = frames.shape();
    if s.len() != 4 || s[1] != 3 || s[0] < 1 || (s[0] - 1) % TEMPORAL_STRIDE != 0 {
        return Err(Error::shape("codec", format!("[4k+1, 3, S, S] frames expected, got {s:?}")));
    }
    let (tl, hw) = (latent_frames(s[0]), s[2] * s[3]);
    let mut out = vec![T::zero(); 12 * tl * hw];
    for k in 0..tl {
        for (slot, &f) in group_indices(k).iter().enumerate() {
            for c in 0..3 {
                let src = &frames.data()[(f * 3 + c) * hw..][..hw];
                let ch = slot * 3 + c;
                out[(ch * tl + k) * hw..][..hw].copy_from_slice(src);
            }
        }
    }
    Tensor::from_vec(&[12, tl, s[2], s[3]], out)
}

#[derive(Clone, Debug)]
pub struct Codec {
    pub enc: Vec<ConvLayer>,
    pub dec: Linear,
    /// Multiplier that brings encoder outputs to unit standard deviation.
    pub scale: ParamId,
    pub latent_channels: usize,
    pub size: usize,
}

impl Codec {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, latent_channels: usize, size: usize, rng: &mut R) -> Self {
        let enc = encoder_chain(latent_channels)
            .into_iter()
            .enumerate()
            .map(|(i, spec)| ConvLayer::new(store, &format!("codec.enc.{i}"), spec, rng))
            .collect();
        let h = size / SPATIAL_STRIDE;
        let dec = Linear::new(
            store,
            "codec.dec",
            latent_channels * h * h,
            TEMPORAL_STRIDE * 3 * size * size,
            true,
            rng,
        );
        let scale = store.add("codec.scale", Tensor::ones(&[1]));
        store.get_mut(scale).trainable = false;
        Self {
            enc,
            dec,
            scale,
            latent_channels,
            size,
        }
    }

    fn scale_value<T: Real>(&self, s: &Session<'_, '_, T>) -> f64 {
        s.store().get(self.scale).value.data()[0].f64()
    }

    /// Grouped input `[12, T_lat, S, S]` to the scaled latent.
    pub fn encode<'g, T: Real>(&self, s: &Session<'g, '_, T>, grouped: Var<'g, T>) -> Result<Var<'g, T>> {
        let mut x = grouped;
        for (i, l) in self.enc.iter().enumerate() {
            x = l.forward(s, x)?;
            if i + 1 < self.enc.len() {
                x = x.silu();
            }
        }
        Ok(x.scale(self.scale_value(s)))
    }

    pub fn encode_frames<'g, T: Real>(&self, s: &Session<'g, '_, T>, frames: &Tensor<T>) -> Result<Var<'g, T>> {
        self.encode(s, s.constant(group_frames(frames)?))
    }

    /// One image `[3, S, S]` to a single latent frame `[c_lat, 1, h, w]`.
    pub fn encode_image<'g, T: Real>(&self, s: &Session<'g, '_, T>, image: &Tensor<T>) -> Result<Var<'g, T>> {
        let sh = image.shape();
        if sh.len() != 3 || sh[0] != 3 {
            return Err(Error::shape("codec", format!("[3, S, S] image expected, got {sh:?}")));
        }
        self.encode_frames(s, &image.clone().reshape(&[1, 3, sh[1], sh[2]])?)
    }

    /// Scaled latent `[c_lat, T_lat, h, w]` to frames `[L, 3, S, S]`.
    pub fn decode<'g, T: Real>(&self, s: &Session<'g, '_, T>, latent: Var<'g, T>) -> Result<Var<'g, T>> {
        let ls = latent.shape();
        if ls.len() != 4 || ls[0] != self.latent_channels {
            return Err(Error::shape("codec", format!("latent {ls:?} vs {} channels", self.latent_channels)));
        }
        let (tl, size) = (ls[1], self.size);
        let x = latent.scale(1.0 / self.scale_value(s));
        let x = x.permute(&[1, 0, 2, 3])?.reshape(&[tl, ls[0] * ls[2] * ls[3]])?;
        let y = self.dec.forward(s, x)?.reshape(&[tl * TEMPORAL_STRIDE, 3 * size * size])?;
        let first = y.slice(0, 0, 1)?;
        let y = if tl > 1 {
            Var::concat(&[first, y.slice(0, TEMPORAL_STRIDE, TEMPORAL_STRIDE * (tl - 1))?], 0)?
        } else {
            first
        };
        let frames = TEMPORAL_STRIDE * (tl - 1) + 1;
        y.reshape(&[frames, 3, size, size])
    }

    /// Reconstruction loss of one clip's frames.
    pub fn reconstruction_loss<'g, T: Real>(&self, s: &Session<'g, '_, T>, frames: &Tensor<T>) -> Result<Var<'g, T>> {
        let z = self.encode_frames(s, frames)?;
        let y = self.decode(s, z)?;
        y.mse(s.constant(frames.clone()))
    }
}

/// Fit the codec to `clips` (each `[L, 3, S, S]`) with plain reconstruction
/// loss, then set the latent scale and freeze every codec parameter. Returns
/// the per-step mean loss.
pub fn pretrain_codec(
    codec: &Codec,
    store: &mut ParamStore<f32>,
    clips: &[Tensor<f32>],
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    if clips.is_empty() {
        return Err(Error::Invalid("codec pretraining needs at least one clip".into()));
    }
    store.set_trainable("codec.", true);
    store.get_mut(codec.scale).trainable = false;
    let mut adam = Adam::new(lr);
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut total = 0.0;
        for frames in clips {
            let g = Graph::new();
            let s = Session::new(&g, store);
            let loss = codec.reconstruction_loss(&s, frames)?.scale(1.0 / clips.len() as f64);
            let grads = s.backward(loss)?;
            total += grads.loss;
            store.accumulate(&grads);
        }
        if !total.is_finite() {
            return Err(Error::Numerical(format!("codec loss diverged: {total}")));
        }
        adam.step(store);
        history.push(total);
    }
    // Unit-variance latents.
    let mut sum_sq = 0.0;
    let mut n = 0usize;
    for frames in clips {
        let g = Graph::new();
        let s = Session::inference(&g, store);
        let z = codec.encode_frames(&s, frames)?.value();
        sum_sq += z.data().iter().map(|v| (v.f64()).powi(2)).sum::<f64>();
        n += z.len();
    }
    let old = store.get(codec.scale).value.data()[0].f64();
    let std = (sum_sq / n as f64).sqrt();
    if std > 0.0 && std.is_finite() {
        store.set_value(codec.scale, Tensor::from_f64(&[1], &[old / std])?)?;
    }
    store.set_trainable("codec.", false);
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ShapeTrace;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grouping_keeps_first_frame_alone() {
        assert_eq!(group_indices(0), [0, 0, 0, 0]);
        assert_eq!(group_indices(1), [1, 2, 3, 4]);
        assert_eq!(group_indices(2), [5, 6, 7, 8]);
        assert_eq!(latent_frames(81), 21);
        assert_eq!(latent_frames(9), 3);
    }

    #[test]
    fn paper_scale_latent_grid() {
        let out = ShapeTrace::run(&encoder_chain(16), [12, 21, 480, 480]).unwrap().output();
        assert_eq!(out, [16, 21, 60, 60]);
    }

    #[test]
    fn group_frames_layout() {
        let data: Vec<f32> = (0..9 * 3 * 16 * 16).map(|i| i as f32).collect();
        let frames = Tensor::from_vec(&[9, 3, 16, 16], data).unwrap();
        let g = group_frames(&frames).unwrap();
        assert_eq!(g.shape(), &[12, 3, 16, 16]);
        // channel (slot 2, colour 1) of latent frame 2 is frame 7, colour 1
        assert_eq!(g.at(&[2 * 3 + 1, 2, 5, 6]), frames.at(&[7, 1, 5, 6]));
        assert_eq!(g.at(&[3 * 3, 0, 0, 0]), frames.at(&[0, 0, 0, 0]));
    }

    #[test]
    fn roundtrip_shapes_and_pretraining_reduces_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let codec = Codec::new(&mut store, 8, 16, &mut rng);
        let frames = Tensor::uniform(&[5, 3, 16, 16], 0.0, 1.0, &mut rng);
        {
            let g = Graph::new();
            let s = Session::new(&g, &store);
            let z = codec.encode_frames(&s, &frames).unwrap();
            assert_eq!(z.shape(), vec![8, 2, 2, 2]);
            assert_eq!(codec.decode(&s, z).unwrap().shape(), vec![5, 3, 16, 16]);
        }
        let hist = pretrain_codec(&codec, &mut store, &[frames], 30, 2e-3).unwrap();
        assert!(hist.last().unwrap() < &hist[0]);
        assert!(store.iter().filter(|(_, p)| p.name.starts_with("codec.")).all(|(_, p)| !p.trainable));
    }
}
