//! Parameterised layers on top of [`crate::autodiff`].
//!
//! Each layer registers its tensors in a [`ParamStore`] under a dotted name
//! and keeps only the ids, so the same layer object drives forward passes in
//! any number of graphs.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Session, Var};
use crate::error::{Error, Result};
use crate::tensor::{LayerKind, LayerSpec, Real, Tensor};

/// Convolution with bias. 2D layers run on `[C, H, W]`, everything else on
/// `[C, T, H, W]`.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub spec: LayerSpec,
    pub w: ParamId,
    pub b: ParamId,
}

impl ConvLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, spec: LayerSpec, rng: &mut R) -> Self {
        let k = spec.kernel;
        let fan_in = spec.channels_in * k[0] * k[1] * k[2];
        let shape = [spec.channels_out, spec.channels_in, k[0], k[1], k[2]];
        let w = store.add(format!("{name}.w"), Tensor::randn(&shape, (1.0 / fan_in as f64).sqrt(), rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[spec.channels_out]));
        Self { spec, w, b }
    }

    pub fn forward<'g, T: Real>(&self, s: &Session<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        if self.spec.kind == LayerKind::Conv2d {
            x.conv2d(&self.spec, s.p(self.w), Some(s.p(self.b)))
        } else {
            x.conv(&self.spec, s.p(self.w), Some(s.p(self.b)))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::randn(&[dout, din], (1.0 / din as f64).sqrt(), rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[dout])));
        Self { w, b }
    }

    /// Weight and bias start at exactly zero.
    pub fn zeros<T: Real>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[dout, din]));
        let b = Some(store.add(format!("{name}.b"), Tensor::zeros(&[dout])));
        Self { w, b }
    }

    pub fn forward<'g, T: Real>(&self, s: &Session<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.linear(s.p(self.w), self.b.map(|b| s.p(b)))
    }
}

/// GroupNorm with a per-channel affine initialised to the identity.
#[derive(Clone, Debug)]
pub struct Norm {
    pub groups: usize,
    pub scale: ParamId,
    pub shift: ParamId,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        let scale = store.add(format!("{name}.scale"), Tensor::ones(&[channels]));
        let shift = store.add(format!("{name}.shift"), Tensor::zeros(&[channels]));
        Self { groups, scale, shift }
    }

    pub fn forward<'g, T: Real>(&self, s: &Session<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.group_norm(self.groups, Some(s.p(self.scale)), Some(s.p(self.shift)))
    }

    /// Statistics per `(frame, group)` of a `[C, T, H, W]` volume, so no frame
    /// sees another.
    pub fn forward_per_frame<'g, T: Real>(&self, s: &Session<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let [c, t, h, w]: [usize; 4] = x
            .shape()
            .try_into()
            .map_err(|_| Error::shape("group_norm", "[C,T,H,W] expected"))?;
        if c % self.groups != 0 {
            return Err(Error::shape("group_norm", format!("{c} channels not divisible into {} groups", self.groups)));
        }
        let rows = x.permute(&[1, 0, 2, 3])?.reshape(&[t * self.groups, (c / self.groups) * h * w])?;
        let n = rows.group_norm(t * self.groups, None, None)?;
        let cl = n.reshape(&[t, c, h * w])?.permute(&[0, 2, 1])?;
        let cl = cl.mul_row(s.p(self.scale))?.add_row(s.p(self.shift))?;
        cl.permute(&[2, 0, 1])?.reshape(&[c, t, h, w])
    }
}

/// `[C, T, H, W]` feature volume to `[T·H·W, C]` tokens in `(t, h, w)` order.
pub fn volume_to_tokens<'g, T: Real>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = x.shape();
    x.reshape(&[s[0], s[1] * s[2] * s[3]])?.transpose()
}

/// Inverse of [`volume_to_tokens`] for a known grid.
pub fn tokens_to_volume<'g, T: Real>(x: Var<'g, T>, grid: [usize; 3]) -> Result<Var<'g, T>> {
    let c = x.shape()[1];
    x.transpose()?.reshape(&[c, grid[0], grid[1], grid[2]])
}

/// Row-major `(t, h, w)` coordinates of every cell of `grid`.
pub fn grid_positions(grid: [usize; 3]) -> Vec<[i64; 3]> {
    let mut out = Vec::with_capacity(grid[0] * grid[1] * grid[2]);
    for t in 0..grid[0] {
        for h in 0..grid[1] {
            for w in 0..grid[2] {
                out.push([t as i64, h as i64, w as i64]);
            }
        }
    }
    out
}

pub fn grid_index(grid: [usize; 3], pos: [usize; 3]) -> usize {
    (pos[0] * grid[1] + pos[1]) * grid[2] + pos[2]
}

pub fn grid_cell(grid: [usize; 3], index: usize) -> [usize; 3] {
    [index / (grid[1] * grid[2]), (index / grid[2]) % grid[1], index % grid[2]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn grid_index_roundtrip(t in 1usize..5, h in 1usize..6, w in 1usize..6) {
            let grid = [t, h, w];
            let pos = grid_positions(grid);
            prop_assert_eq!(pos.len(), t * h * w);
            for (i, p) in pos.iter().enumerate() {
                let cell = [p[0] as usize, p[1] as usize, p[2] as usize];
                prop_assert_eq!(grid_index(grid, cell), i);
                prop_assert_eq!(grid_cell(grid, i), cell);
            }
        }
    }
}
