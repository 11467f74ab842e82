//! Layer descriptors and allocation-free shape inference over layer chains.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    Conv3d,
    /// Temporal padding sits entirely before t = 0.
    CausalConv3d,
    GroupNorm { groups: usize },
    Silu,
    Linear,
    /// Self-attention along one axis; shape preserving.
    Attention,
    /// Non-overlapping conv with kernel == stride.
    Patchify3d,
}

/// One layer of an encoder chain. Extents are ordered (t, h, w); 2D layers use
/// a temporal kernel and stride of 1 and act frame by frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    /// Symmetric padding per axis. For `CausalConv3d` the temporal entry is
    /// the total past-side padding.
    pub padding: [usize; 3],
    pub channels_in: usize,
    pub channels_out: usize,
}

impl LayerSpec {
    pub fn conv3d(cin: usize, cout: usize, kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self {
            kind: LayerKind::Conv3d,
            kernel,
            stride,
            padding,
            channels_in: cin,
            channels_out: cout,
        }
    }

    pub fn conv2d(cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kind: LayerKind::Conv2d,
            kernel: [1, kernel, kernel],
            stride: [1, stride, stride],
            padding: [0, padding, padding],
            channels_in: cin,
            channels_out: cout,
        }
    }

    /// Causal conv with `k_t - 1` frames of past padding and symmetric
    /// spatial padding `k/2`.
    pub fn causal_conv3d(cin: usize, cout: usize, kernel: [usize; 3], stride: [usize; 3]) -> Self {
        Self {
            kind: LayerKind::CausalConv3d,
            kernel,
            stride,
            padding: [kernel[0] - 1, kernel[1] / 2, kernel[2] / 2],
            channels_in: cin,
            channels_out: cout,
        }
    }

    pub fn patchify3d(cin: usize, cout: usize, kernel: [usize; 3]) -> Self {
        Self {
            kind: LayerKind::Patchify3d,
            kernel,
            stride: kernel,
            padding: [0; 3],
            channels_in: cin,
            channels_out: cout,
        }
    }

    pub fn group_norm(channels: usize, groups: usize) -> Self {
        Self::pointwise(LayerKind::GroupNorm { groups }, channels, channels)
    }

    pub fn silu(channels: usize) -> Self {
        Self::pointwise(LayerKind::Silu, channels, channels)
    }

    pub fn linear(cin: usize, cout: usize) -> Self {
        Self::pointwise(LayerKind::Linear, cin, cout)
    }

    pub fn attention(channels: usize) -> Self {
        Self::pointwise(LayerKind::Attention, channels, channels)
    }

    fn pointwise(kind: LayerKind, cin: usize, cout: usize) -> Self {
        Self {
            kind,
            kernel: [1; 3],
            stride: [1; 3],
            padding: [0; 3],
            channels_in: cin,
            channels_out: cout,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Conv2d | LayerKind::Conv3d | LayerKind::CausalConv3d | LayerKind::Patchify3d
        )
    }

    /// (before, after) padding on each axis.
    pub fn pads(&self) -> [(usize, usize); 3] {
        let p = self.padding;
        match self.kind {
            LayerKind::CausalConv3d => [(p[0], 0), (p[1], p[1]), (p[2], p[2])],
            _ => [(p[0], p[0]), (p[1], p[1]), (p[2], p[2])],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::Invalid(format!("non-positive kernel/stride in {self:?}")));
        }
        if self.channels_in == 0 || self.channels_out == 0 {
            return Err(Error::Invalid(format!("zero channels in {self:?}")));
        }
        if let LayerKind::GroupNorm { groups } = self.kind {
            if groups == 0 || self.channels_in % groups != 0 {
                return Err(Error::Invalid(format!(
                    "{} channels not divisible into {groups} groups",
                    self.channels_in
                )));
            }
        }
        Ok(())
    }

    /// Output shape `[C_out, T', H', W']` for an input `[C_in, T, H, W]`.
    pub fn infer(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        self.validate()?;
        if input[0] != self.channels_in {
            return Err(Error::shape(
                "layer",
                format!("{:?} expects {} input channels, got {}", self.kind, self.channels_in, input[0]),
            ));
        }
        if !self.is_conv() {
            return Ok([self.channels_out, input[1], input[2], input[3]]);
        }
        let mut out = [self.channels_out, 0, 0, 0];
        for (axis, (before, after)) in self.pads().into_iter().enumerate() {
            out[axis + 1] = conv_out_extent(input[axis + 1], self.kernel[axis], self.stride[axis], before + after)?;
        }
        Ok(out)
    }
}

/// `floor((n + pad - k) / s) + 1`, rejecting non-positive results.
pub fn conv_out_extent(n: usize, k: usize, s: usize, pad_total: usize) -> Result<usize> {
    if s == 0 || k == 0 {
        return Err(Error::Invalid("kernel and stride must be positive".into()));
    }
    if n + pad_total < k {
        return Err(Error::shape(
            "conv",
            format!("extent {n} with padding {pad_total} is smaller than kernel {k}"),
        ));
    }
    Ok((n + pad_total - k) / s + 1)
}

/// Shapes after each layer of a chain, computed without allocating tensors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeTrace {
    pub input: [usize; 4],
    pub layers: Vec<(LayerSpec, [usize; 4])>,
}

impl ShapeTrace {
    pub fn run(chain: &[LayerSpec], input: [usize; 4]) -> Result<Self> {
        let mut cur = input;
        let mut layers = Vec::with_capacity(chain.len());
        for spec in chain {
            cur = spec.infer(cur)?;
            layers.push((*spec, cur));
        }
        Ok(Self { input, layers })
    }

    pub fn output(&self) -> [usize; 4] {
        self.layers.last().map(|l| l.1).unwrap_or(self.input)
    }
}
