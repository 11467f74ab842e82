//! Hand-kinematic (HKE), ego-motion (EME) and object-entity (OEE) encoders.
//!
//! Every encoder is described twice: as a [`LayerSpec`] chain used for the
//! analytic shape audit, and as parameterised layers that run on desk-scale
//! inputs. Both are built from the same [`EncoderConfig`], so the audit and
//! the executed graph cannot drift apart.

use rand::Rng;

use crate::autodiff::{ParamStore, Session, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{grid_positions, volume_to_tokens, ConvLayer, Linear, Norm};
use crate::tensor::{LayerSpec, Real, Tensor};

/// Visibility-mask channels appended to the first-frame latent in the anchor.
pub const MASK_CHANNELS: usize = 4;

/// Hidden channel counts of the encoder tables at full scale.
const HKE_HIDDEN: usize = 16;
const REF_HIDDEN: usize = 16;
const EME_DOWN: [usize; 3] = [16, 32, 64];
const EME_STAGES: [usize; 3] = [64, 128, 256];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Hke,
    Eme,
    Oee,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Divides every hidden channel count of the tables.
    pub hidden_div: usize,
    /// Token width d.
    pub width: usize,
    pub latent_channels: usize,
    pub norm_groups: usize,
    /// Per-stage flag for an extra stride-2 spatial convolution.
    pub stage_stride: [bool; 3],
    pub attn_heads: usize,
}

impl EncoderConfig {
    pub fn paper() -> Self {
        Self {
            hidden_div: 1,
            width: 5120,
            latent_channels: 16,
            norm_groups: 4,
            stage_stride: [false; 3],
            attn_heads: 1,
        }
    }

    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            hidden_div: cfg.channel_div,
            width: cfg.width,
            latent_channels: cfg.latent_channels,
            norm_groups: cfg.norm_groups,
            stage_stride: [false; 3],
            attn_heads: 1,
        }
    }

    fn hidden(&self, c: usize) -> usize {
        (c / self.hidden_div).max(1)
    }

    /// Reference-feature width: latent channels plus the visibility mask.
    pub fn ref_channels(&self) -> usize {
        self.latent_channels + MASK_CHANNELS
    }

    pub fn hke_chain(&self) -> Vec<LayerSpec> {
        let h = self.hidden(HKE_HIDDEN);
        let k = [3, 3, 3];
        let p = [1, 1, 1];
        vec![
            LayerSpec::conv3d(3, h, k, [1, 1, 1], p),
            LayerSpec::conv3d(h, h, k, [1, 1, 1], p),
            LayerSpec::conv3d(h, h, k, [1, 1, 1], p),
            LayerSpec::conv3d(h, h, k, [1, 2, 2], p),
            LayerSpec::conv3d(h, h, k, [2, 2, 2], p),
            LayerSpec::conv3d(h, h, k, [2, 2, 2], p),
            LayerSpec::conv3d(h, self.width, [1, 2, 2], [1, 2, 2], [0, 0, 0]),
        ]
    }

    pub fn ref_chain(&self) -> Vec<LayerSpec> {
        let h = self.hidden(REF_HIDDEN);
        vec![
            LayerSpec::conv2d(3, h, 3, 1, 1),
            LayerSpec::conv2d(h, h, 3, 1, 1),
            LayerSpec::conv2d(h, h, 3, 1, 1),
            LayerSpec::conv2d(h, h, 3, 2, 1),
            LayerSpec::conv2d(h, h, 3, 2, 1),
            LayerSpec::conv2d(h, self.ref_channels(), 3, 2, 1),
        ]
    }

    /// The three causal downsampling convolutions.
    pub fn eme_down_convs(&self) -> Vec<LayerSpec> {
        let c = EME_DOWN.map(|c| self.hidden(c));
        vec![
            LayerSpec::causal_conv3d(6, c[0], [3, 3, 3], [2, 2, 2]),
            LayerSpec::causal_conv3d(c[0], c[1], [3, 3, 3], [2, 2, 2]),
            LayerSpec::causal_conv3d(c[1], c[2], [3, 3, 3], [1, 2, 2]),
        ]
    }

    /// Downsampler including its norm and activation layers.
    pub fn eme_down_chain(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        for conv in self.eme_down_convs() {
            let c = conv.channels_out;
            out.push(conv);
            out.push(LayerSpec::group_norm(c, self.norm_groups));
            out.push(LayerSpec::silu(c));
        }
        out
    }

    pub fn eme_stage_channels(&self) -> [usize; 3] {
        EME_STAGES.map(|c| self.hidden(c))
    }

    /// Per-frame convolutions of stage `i` as `(1,3,3)` 3D layers.
    pub fn eme_stage_convs(&self, i: usize) -> Vec<LayerSpec> {
        let cin = if i == 0 { self.hidden(EME_DOWN[2]) } else { self.eme_stage_channels()[i - 1] };
        let c = self.eme_stage_channels()[i];
        let mut out = vec![
            LayerSpec::conv3d(cin, c, [1, 3, 3], [1, 1, 1], [0, 1, 1]),
            LayerSpec::conv3d(c, c, [1, 3, 3], [1, 1, 1], [0, 1, 1]),
        ];
        if self.stage_stride[i] {
            out.push(LayerSpec::conv3d(c, c, [1, 3, 3], [1, 2, 2], [0, 1, 1]));
        }
        out
    }

    pub fn eme_head_chain(&self) -> Vec<LayerSpec> {
        let c = self.eme_stage_channels()[2];
        vec![
            LayerSpec::group_norm(c, self.norm_groups),
            LayerSpec::conv3d(c, c, [1, 1, 1], [1, 1, 1], [0, 0, 0]),
            LayerSpec::patchify3d(c, self.width, [1, 2, 2]),
        ]
    }

    /// The full ego-motion pipeline as one chain (attention is shape-preserving).
    pub fn eme_chain(&self) -> Vec<LayerSpec> {
        let mut out = self.eme_down_chain();
        for i in 0..3 {
            let convs = self.eme_stage_convs(i);
            let c = convs[0].channels_out;
            out.extend(convs);
            out.push(LayerSpec::attention(c));
        }
        out.extend(self.eme_head_chain());
        out
    }

    pub fn oee_patchify(&self) -> LayerSpec {
        LayerSpec::patchify3d(self.latent_channels, self.width, [1, 2, 2])
    }
}

/// Tokens of one conditioning stream with their grid provenance.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingTokens<'g, T: Real> {
    /// `[T'·H'·W', d]`, rows in `(t, h, w)` order.
    pub tokens: Var<'g, T>,
    pub grid: [usize; 3],
    pub stream: Stream,
    pub shift: [i64; 3],
}

impl<T: Real> EmbeddingTokens<'_, T> {
    pub fn len(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Unshifted grid coordinates, one per token.
    pub fn positions(&self) -> Vec<[i64; 3]> {
        grid_positions(self.grid)
    }
}

fn build_convs<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    chain: &[LayerSpec],
    rng: &mut R,
) -> Vec<ConvLayer> {
    chain
        .iter()
        .enumerate()
        .map(|(i, spec)| ConvLayer::new(store, &format!("{prefix}.{i}"), *spec, rng))
        .collect()
}

/// Convolutions with SiLU between them (none after the last).
fn run_stack<'g, T: Real>(s: &Session<'g, '_, T>, layers: &[ConvLayer], mut x: Var<'g, T>) -> Result<Var<'g, T>> {
    for (i, l) in layers.iter().enumerate() {
        x = l.forward(s, x)?;
        if i + 1 < layers.len() {
            x = x.silu();
        }
    }
    Ok(x)
}

fn token_grid(shape: &[usize]) -> [usize; 3] {
    [shape[1], shape[2], shape[3]]
}

/// Temporal 3D convolution stack over the stacked hand renders.
#[derive(Clone, Debug)]
pub struct HandEncoder {
    pub layers: Vec<ConvLayer>,
}

impl HandEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut R) -> Self {
        Self {
            layers: build_convs(store, "hke", &cfg.hke_chain(), rng),
        }
    }

    /// `hands[3, L, S, S]` to tokens.
    pub fn forward<'g, T: Real>(&self, s: &Session<'g, '_, T>, hands: Var<'g, T>) -> Result<EmbeddingTokens<'g, T>> {
        let x = run_stack(s, &self.layers, hands)?;
        let grid = token_grid(&x.shape());
        Ok(EmbeddingTokens {
            tokens: volume_to_tokens(x)?,
            grid,
            stream: Stream::Hke,
            shift: [0; 3],
        })
    }
}

/// 2D pyramid over the first-frame hand render.
#[derive(Clone, Debug)]
pub struct RefHandEncoder {
    pub layers: Vec<ConvLayer>,
}

impl RefHandEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut R) -> Self {
        Self {
            layers: build_convs(store, "ref", &cfg.ref_chain(), rng),
        }
    }

    /// `render[3, S, S]` to the reference feature `[C_ref, S/8, S/8]`.
    pub fn forward<'g, T: Real>(&self, s: &Session<'g, '_, T>, render: Var<'g, T>) -> Result<Var<'g, T>> {
        run_stack(s, &self.layers, render)
    }
}

/// Self-attention along the frame axis of a `[C, T, H, W]` volume, one
/// sequence per pixel.
#[derive(Clone, Debug)]
pub struct TemporalAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl TemporalAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let mut lin = |n: &str, rng: &mut R| Linear::new(store, &format!("{name}.{n}"), channels, channels, true, rng);
        Self {
            q: lin("q", rng),
            k: lin("k", rng),
            v: lin("v", rng),
            o: lin("o", rng),
            heads,
        }
    }

    pub fn forward<'g, T: Real>(&self, s: &Session<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let [c, t, h, w]: [usize; 4] = x
            .shape()
            .try_into()
            .map_err(|_| Error::shape("temporal_attention", "[C,T,H,W] expected"))?;
        let seq = x.permute(&[2, 3, 1, 0])?.reshape(&[h * w, t, c])?;
        let q = self.q.forward(s, seq)?;
        let k = self.k.forward(s, seq)?;
        let v = self.v.forward(s, seq)?;
        let a = q.attention(k, v, self.heads)?;
        let y = self.o.forward(s, a)?;
        y.reshape(&[h, w, t, c])?.permute(&[3, 2, 0, 1])
    }
}

/// Two per-frame 3×3 convolutions with a residual, optional spatial
/// downsampling, then temporal attention (also residual).
#[derive(Clone, Debug)]
pub struct HybridStage {
    pub conv_a: ConvLayer,
    pub conv_b: ConvLayer,
    pub down: Option<ConvLayer>,
    pub attn: TemporalAttention,
}

impl HybridStage {
    pub fn forward<'g, T: Real>(&self, s: &Session<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let a = self.conv_a.forward(s, x)?.silu();
        let b = self.conv_b.forward(s, a)?;
        let mut y = a.add(b)?.silu();
        if let Some(d) = &self.down {
            y = d.forward(s, y)?.silu();
        }
        y.add(self.attn.forward(s, y)?)
    }
}

/// Causal downsampler, hybrid stages and projection head over a Plücker volume.
///
/// The downsampler normalises each frame separately so that it stays causal.
#[derive(Clone, Debug)]
pub struct EgoMotionEncoder {
    pub down: Vec<(ConvLayer, Norm)>,
    pub stages: Vec<HybridStage>,
    pub head_norm: Norm,
    pub head_mix: ConvLayer,
    pub patchify: ConvLayer,
}

impl EgoMotionEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let down = cfg
            .eme_down_convs()
            .into_iter()
            .enumerate()
            .map(|(i, spec)| {
                let conv = ConvLayer::new(store, &format!("eme.down.{i}"), spec, rng);
                let norm = Norm::new(store, &format!("eme.down.{i}.norm"), spec.channels_out, cfg.norm_groups);
                (conv, norm)
            })
            .collect();
        let stages = (0..3)
            .map(|i| {
                let specs = cfg.eme_stage_convs(i);
                let name = format!("eme.stage.{i}");
                HybridStage {
                    conv_a: ConvLayer::new(store, &format!("{name}.conv_a"), specs[0], rng),
                    conv_b: ConvLayer::new(store, &format!("{name}.conv_b"), specs[1], rng),
                    down: specs.get(2).map(|sp| ConvLayer::new(store, &format!("{name}.down"), *sp, rng)),
                    attn: TemporalAttention::new(store, &format!("{name}.attn"), specs[0].channels_out, cfg.attn_heads, rng),
                }
            })
            .collect();
        let head = cfg.eme_head_chain();
        Self {
            down,
            stages,
            head_norm: Norm::new(store, "eme.head.norm", head[0].channels_in, cfg.norm_groups),
            head_mix: ConvLayer::new(store, "eme.head.mix", head[1], rng),
            patchify: ConvLayer::new(store, "eme.head.patchify", head[2], rng),
        }
    }

    /// Output of the causal downsampler only.
    pub fn downsample<'g, T: Real>(&self, s: &Session<'g, '_, T>, mut x: Var<'g, T>) -> Result<Var<'g, T>> {
        for (conv, norm) in &self.down {
            x = norm.forward_per_frame(s, conv.forward(s, x)?)?.silu();
        }
        Ok(x)
    }

    /// `plucker[6, L, S, S]` to tokens.
    pub fn forward<'g, T: Real>(&self, s: &Session<'g, '_, T>, plucker: Var<'g, T>) -> Result<EmbeddingTokens<'g, T>> {
        let mut x = self.downsample(s, plucker)?;
        for st in &self.stages {
            x = st.forward(s, x)?;
        }
        let x = self.head_norm.forward(s, x)?;
        let x = self.head_mix.forward(s, x)?;
        let x = self.patchify.forward(s, x)?;
        let grid = token_grid(&x.shape());
        Ok(EmbeddingTokens {
            tokens: volume_to_tokens(x)?,
            grid,
            stream: Stream::Eme,
            shift: [0; 3],
        })
    }
}

/// Patchifier for the codec latent of the first-frame object image.
#[derive(Clone, Debug)]
pub struct ObjectEncoder {
    pub patchify: ConvLayer,
    pub shift: [i64; 3],
}

impl ObjectEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &EncoderConfig,
        shift: [i64; 3],
        rng: &mut R,
    ) -> Self {
        Self {
            patchify: ConvLayer::new(store, "oee.patchify", cfg.oee_patchify(), rng),
            shift,
        }
    }

    /// `latent[c_lat, 1, h, w]` (one encoded frame) broadcast over `frames`
    /// latent frames, then patchified.
    pub fn forward<'g, T: Real>(
        &self,
        s: &Session<'g, '_, T>,
        latent: Var<'g, T>,
        frames: usize,
    ) -> Result<EmbeddingTokens<'g, T>> {
        let ls = latent.shape();
        if ls.len() != 4 || ls[1] != 1 {
            return Err(Error::shape("object_encoder", format!("[C,1,H,W] latent expected, got {ls:?}")));
        }
        let x = Var::concat(&vec![latent; frames], 1)?;
        let x = self.patchify.forward(s, x)?;
        let grid = token_grid(&x.shape());
        Ok(EmbeddingTokens {
            tokens: volume_to_tokens(x)?,
            grid,
            stream: Stream::Oee,
            shift: self.shift,
        })
    }
}

/// Grayscale hand maps `[L, 1, S, S]` replicated into the `[3, L, S, S]` volume.
pub fn hand_volume<T: Real>(maps: &Tensor<T>) -> Result<Tensor<T>> {
    let s = maps.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape("hand_volume", format!("[L,1,S,S] expected, got {s:?}")));
    }
    let one = maps.clone().reshape(&[1, s[0], s[2], s[3]])?;
    let mut data = Vec::with_capacity(3 * one.len());
    for _ in 0..3 {
        data.extend_from_slice(one.data());
    }
    Tensor::from_vec(&[3, s[0], s[2], s[3]], data)
}
