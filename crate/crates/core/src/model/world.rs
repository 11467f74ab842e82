//! The full world model: encoders, codec and denoiser wired together, plus
//! the loss, the training loop and the rollout sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::codec::{latent_frames, pretrain_codec, Codec};
use super::dit::{Dit, DitConditioning, DitConfig};
use super::schedule::{ancestral_step, forward_noising, NoiseSchedule};
use crate::autodiff::{Adam, Graph, ParamStore, Session, Var};
use crate::camera::{plucker_volume, Intrinsics, Trajectory};
use crate::config::RunConfig;
use crate::embeddings::{
    hand_volume, EgoMotionEncoder, EncoderConfig, HandEncoder, ObjectEncoder, RefHandEncoder, MASK_CHANNELS,
};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-frame hand renders and first-frame-relative head poses.
#[derive(Clone, Debug)]
pub struct ActionScript {
    /// `[L, 1, S, S]` grayscale hand maps.
    pub hand_maps: Tensor<f32>,
    pub trajectory: Trajectory,
    pub intrinsics: Intrinsics,
}

impl ActionScript {
    pub fn len(&self) -> usize {
        self.trajectory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectory.is_empty()
    }
}

/// Everything the model reads from a clip.
#[derive(Clone, Debug)]
pub struct ClipInputs {
    /// `[3, S, S]`.
    pub first_frame: Tensor<f32>,
    /// First-frame object mask rendered as RGB on black, `[3, S, S]`.
    pub object_image: Tensor<f32>,
    pub actions: ActionScript,
    /// Ground-truth frames `[L, 3, S, S]`, needed for training only.
    pub frames: Option<Tensor<f32>>,
}

/// Which conditioning streams a forward pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Streams {
    pub hke: bool,
    pub eme: bool,
    pub oee: bool,
    pub context: bool,
}

impl Streams {
    pub const ALL: Streams = Streams {
        hke: true,
        eme: true,
        oee: true,
        context: true,
    };
}

/// Codec outputs and fixed encoder inputs of one clip, computed once the
/// codec is frozen.
#[derive(Clone, Debug)]
pub struct PreparedClip<T: Real> {
    pub z0: Option<Tensor<T>>,
    /// `[c_lat, 1, h, w]` latent of the first frame.
    pub first_latent: Tensor<T>,
    /// `[c_lat, 1, h, w]` latent of the object image.
    pub object_latent: Tensor<T>,
    /// `[3, L, S, S]`.
    pub hands: Tensor<T>,
    /// `[3, S, S]` first hand map, replicated to three channels.
    pub first_hand: Tensor<T>,
    /// `[6, L, S, S]`.
    pub plucker: Tensor<T>,
    pub first_frame: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub cfg: RunConfig,
    pub enc: EncoderConfig,
    pub schedule: NoiseSchedule,
    pub codec: Codec,
    pub hke: HandEncoder,
    pub reference: RefHandEncoder,
    pub eme: EgoMotionEncoder,
    pub oee: ObjectEncoder,
    pub context: super::dit::ContextEncoder,
    pub dit: Dit,
}

impl WorldModel {
    /// Register every parameter in `store` with a fresh initialisation.
    pub fn new<T: Real, R: Rng + ?Sized>(cfg: &RunConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let enc = EncoderConfig::from_run(cfg);
        let schedule = NoiseSchedule::linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)?;
        let codec = Codec::new(store, cfg.latent_channels, cfg.size, rng);
        let hke = HandEncoder::new(store, &enc, rng);
        let reference = RefHandEncoder::new(store, &enc, rng);
        let eme = EgoMotionEncoder::new(store, &enc, rng);
        let shift = cfg.rope_shift.resolve(cfg.token_grid());
        let oee = ObjectEncoder::new(store, &enc, shift, rng);
        let context = super::dit::ContextEncoder::new(store, cfg.context_tokens, cfg.width, rng);
        let dit = Dit::new(
            store,
            DitConfig {
                blocks: cfg.blocks,
                adapter_depth: cfg.adapter_depth,
                width: cfg.width,
                heads: cfg.heads,
                mlp_ratio: cfg.mlp_ratio,
                context_tokens: cfg.context_tokens,
                gate_init: cfg.gate_init,
                guidance: cfg.guidance,
                latent_channels: cfg.latent_channels,
                anchor_channels: enc.ref_channels(),
            },
            rng,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            enc,
            schedule,
            codec,
            hke,
            reference,
            eme,
            oee,
            context,
            dit,
        })
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        let [t, h, w] = self.cfg.latent_grid();
        [self.cfg.latent_channels, t, h, w]
    }

    fn check_inputs(&self, inputs: &ClipInputs) -> Result<()> {
        let (l, s) = (self.cfg.frames, self.cfg.size);
        if inputs.actions.len() != l {
            return Err(Error::Invalid(format!(
                "action script covers {} frames, model horizon is {l}",
                inputs.actions.len()
            )));
        }
        if inputs.actions.hand_maps.shape() != [l, 1, s, s] {
            return Err(Error::shape("world_model", format!("hand maps {:?}", inputs.actions.hand_maps.shape())));
        }
        for img in [&inputs.first_frame, &inputs.object_image] {
            if img.shape() != [3, s, s] {
                return Err(Error::shape("world_model", format!("image {:?} vs [3,{s},{s}]", img.shape())));
            }
        }
        if let Some(f) = &inputs.frames {
            if f.shape() != [l, 3, s, s] {
                return Err(Error::shape("world_model", format!("frames {:?}", f.shape())));
            }
        }
        Ok(())
    }

    /// Run the frozen codec and assemble the fixed encoder inputs.
    pub fn prepare<T: Real>(&self, store: &ParamStore<T>, inputs: &ClipInputs) -> Result<PreparedClip<T>> {
        self.check_inputs(inputs)?;
        let g = Graph::new();
        let s = Session::inference(&g, store);
        let z0 = match &inputs.frames {
            Some(f) => Some((*self.codec.encode_frames(&s, &f.cast())?.value()).clone()),
            None => None,
        };
        let first_latent = (*self.codec.encode_image(&s, &inputs.first_frame.cast())?.value()).clone();
        let object_latent = (*self.codec.encode_image(&s, &inputs.object_image.cast())?.value()).clone();
        let hands = hand_volume(&inputs.actions.hand_maps.cast::<T>())?;
        let size = self.cfg.size;
        let first_hand = {
            let maps = inputs.actions.hand_maps.cast::<T>();
            let one = &maps.data()[..size * size];
            Tensor::from_vec(&[3, size, size], [one, one, one].concat())?
        };
        let plucker = plucker_volume::<T>(
            &inputs.actions.intrinsics,
            &inputs.actions.trajectory,
            size,
            size,
            self.cfg.ray_convention,
        )?;
        Ok(PreparedClip {
            z0,
            first_latent,
            object_latent,
            hands,
            first_hand,
            plucker,
            first_frame: inputs.first_frame.cast(),
        })
    }

    /// First-frame anchor `Y + R_ref` over every latent frame:
    /// `[C_ref, T_lat, h, w]`.
    pub fn anchor<'g, T: Real>(
        &self,
        s: &Session<'g, '_, T>,
        first_latent: &Tensor<T>,
        r_ref: Option<Var<'g, T>>,
    ) -> Result<Var<'g, T>> {
        let [c, tl, h, w] = self.latent_shape();
        let mut y = vec![T::zero(); (c + MASK_CHANNELS) * tl * h * w];
        let hw = h * w;
        for ch in 0..c {
            y[ch * tl * hw..][..hw].copy_from_slice(&first_latent.data()[ch * hw..][..hw]);
        }
        for m in 0..MASK_CHANNELS {
            y[(c + m) * tl * hw..][..hw].fill(T::one());
        }
        let y = s.constant(Tensor::from_vec(&[c + MASK_CHANNELS, tl, h, w], y)?);
        match r_ref {
            None => Ok(y),
            Some(r) => {
                let cr = c + MASK_CHANNELS;
                if r.shape() != [cr, h, w] {
                    return Err(Error::shape("anchor", format!("reference feature {:?} vs [{cr},{h},{w}]", r.shape())));
                }
                let r = r.reshape(&[cr, 1, h, w])?;
                let r = if tl > 1 {
                    Var::concat(&[r, s.constant(Tensor::zeros(&[cr, tl - 1, h, w]))], 1)?
                } else {
                    r
                };
                y.add(r)
            }
        }
    }

    /// Build the conditioning streams of one clip inside `s`.
    pub fn condition<'g, T: Real>(
        &self,
        s: &Session<'g, '_, T>,
        clip: &PreparedClip<T>,
        streams: Streams,
    ) -> Result<DitConditioning<'g, T>> {
        let r_ref = self.reference.forward(s, s.constant(clip.first_hand.clone()))?;
        let anchor = self.anchor(s, &clip.first_latent, Some(r_ref))?;
        let tl = latent_frames(self.cfg.frames);
        let hke = if streams.hke {
            Some(self.hke.forward(s, s.constant(clip.hands.clone()))?.tokens)
        } else {
            None
        };
        let eme = if streams.eme {
            Some(self.eme.forward(s, s.constant(clip.plucker.clone()))?.tokens)
        } else {
            None
        };
        let oee = if streams.oee {
            Some(self.oee.forward(s, s.constant(clip.object_latent.clone()), tl)?.tokens)
        } else {
            None
        };
        let context = if streams.context {
            Some(self.context.forward(s, s.constant(clip.first_frame.clone()))?)
        } else {
            None
        };
        Ok(DitConditioning {
            anchor,
            hke,
            eme,
            oee,
            oee_shift: self.oee.shift,
            context,
        })
    }

    /// `ε̂(z_t, t | conditioning)`.
    pub fn denoise<'g, T: Real>(
        &self,
        s: &Session<'g, '_, T>,
        z_t: Var<'g, T>,
        t: usize,
        cond: &DitConditioning<'g, T>,
    ) -> Result<Var<'g, T>> {
        self.dit.forward(s, z_t, t, cond)
    }

    /// `mean((ε − ε̂(√ᾱ_t z_0 + √(1−ᾱ_t) ε, t))²)`.
    pub fn training_loss<'g, T: Real>(
        &self,
        s: &Session<'g, '_, T>,
        z0: &Tensor<T>,
        t: usize,
        eps: &Tensor<T>,
        cond: &DitConditioning<'g, T>,
    ) -> Result<Var<'g, T>> {
        let zt = forward_noising(z0, t, eps, &self.schedule)?;
        let pred = self.denoise(s, s.constant(zt), t, cond)?;
        pred.mse(s.constant(eps.clone()))
    }

    /// Mean loss over a fixed, evenly spaced set of timesteps with noise drawn
    /// from `seed`. Deterministic; used to track overfitting.
    pub fn eval_loss(&self, store: &ParamStore<f32>, clips: &[PreparedClip<f32>], points: usize, seed: u64) -> Result<f64> {
        let big_t = self.schedule.len();
        let mut total = 0.0;
        let mut count = 0usize;
        for (ci, clip) in clips.iter().enumerate() {
            let z0 = clip.z0.as_ref().ok_or_else(|| Error::Invalid("clip has no target frames".into()))?;
            let g = Graph::new();
            let s = Session::inference(&g, store);
            let cond = self.condition(&s, clip, Streams::ALL)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((ci as u64) << 32));
            for k in 0..points {
                let t = 1 + (k * (big_t - 1)) / (points.max(2) - 1);
                let eps = Tensor::randn(z0.shape(), 1.0, &mut rng);
                total += self.training_loss(&s, z0, t, &eps, &cond)?.value().item().f64();
                count += 1;
            }
        }
        Ok(total / count.max(1) as f64)
    }

    /// One optimiser step over `batch` clips chosen cyclically. Noise and
    /// timesteps come from a generator keyed by `(seed, step)`, so a resumed
    /// run repeats exactly the steps an uninterrupted one would take.
    pub fn train_step(
        &self,
        store: &mut ParamStore<f32>,
        adam: &mut Adam<f32>,
        clips: &[PreparedClip<f32>],
        step: u64,
    ) -> Result<f64> {
        if clips.is_empty() {
            return Err(Error::Invalid("empty dataset".into()));
        }
        let batch = self.cfg.batch.min(clips.len()).max(1);
        let mut rng = step_rng(self.cfg.seed, step);
        let mut total = 0.0;
        for b in 0..batch {
            let clip = &clips[(step as usize * batch + b) % clips.len()];
            let z0 = clip.z0.as_ref().ok_or_else(|| Error::Invalid("clip has no target frames".into()))?;
            let t = rng.random_range(1..=self.schedule.len());
            let eps = Tensor::randn(z0.shape(), 1.0, &mut rng);
            let g = Graph::new();
            let s = Session::new(&g, store);
            let cond = self.condition(&s, clip, Streams::ALL)?;
            let loss = self.training_loss(&s, z0, t, &eps, &cond)?.scale(1.0 / batch as f64);
            let grads = s.backward(loss)?;
            total += grads.loss;
            store.accumulate(&grads);
        }
        if !total.is_finite() {
            return Err(Error::Numerical(format!("training loss is {total} at step {step}")));
        }
        adam.step(store);
        Ok(total)
    }

    /// Jointly denoise the whole clip latent over `steps` sampler iterations
    /// and decode it to `[L, 3, S, S]` frames clamped to `[0, 1]`.
    pub fn sample_rollout<R: Rng + ?Sized>(
        &self,
        store: &ParamStore<f32>,
        inputs: &ClipInputs,
        steps: usize,
        rng: &mut R,
    ) -> Result<Tensor<f32>> {
        let latent = self.sample_latent(store, inputs, steps, rng)?;
        let g = Graph::new();
        let s = Session::inference(&g, store);
        let frames = self.codec.decode(&s, s.constant(latent))?.value();
        Ok(frames.map(|v| v.clamp(0.0, 1.0)))
    }

    /// The denoised latent `[c_lat, T_lat, h, w]` of a rollout.
    pub fn sample_latent<R: Rng + ?Sized>(
        &self,
        store: &ParamStore<f32>,
        inputs: &ClipInputs,
        steps: usize,
        rng: &mut R,
    ) -> Result<Tensor<f32>> {
        if steps > self.schedule.len() {
            return Err(Error::Invalid(format!("{steps} sampler steps exceed T = {}", self.schedule.len())));
        }
        let clip = self.prepare(store, &ClipInputs { frames: None, ..inputs.clone() })?;
        let g = Graph::new();
        let s = Session::inference(&g, store);
        let cond = self.condition(&s, &clip, Streams::ALL)?;
        let fixed = FrozenConditioning::capture(&cond);
        let mut z = Tensor::<f32>::randn(&self.latent_shape(), 1.0, rng);
        let ts = self.schedule.sampler_timesteps(steps);
        for (i, &t) in ts.iter().enumerate() {
            let next = ts.get(i + 1).copied().unwrap_or(0);
            let g = Graph::new();
            let s = Session::inference(&g, store);
            let cond = fixed.bind(&s);
            let eps = self.denoise(&s, s.constant(z.clone()), t, &cond)?.value();
            z = ancestral_step(&z, &eps, t, next, &self.schedule, rng)?;
            if !z.all_finite() {
                return Err(Error::Numerical(format!("non-finite latent at sampler step {t}")));
            }
        }
        Ok(z)
    }

    /// Per-frame view of a jointly denoised rollout latent: latent frame `k`
    /// as `[c_lat, h, w]`.
    pub fn latent_states(latent: &Tensor<f32>) -> Vec<Tensor<f32>> {
        let s = latent.shape();
        let (c, t, hw) = (s[0], s[1], s[2] * s[3]);
        (0..t)
            .map(|k| {
                let mut v = Vec::with_capacity(c * hw);
                for ch in 0..c {
                    v.extend_from_slice(&latent.data()[(ch * t + k) * hw..][..hw]);
                }
                Tensor::raw(vec![c, s[2], s[3]], v)
            })
            .collect()
    }
}

/// Conditioning values detached from their graph.
struct FrozenConditioning<T: Real> {
    anchor: Tensor<T>,
    hke: Option<Tensor<T>>,
    eme: Option<Tensor<T>>,
    oee: Option<Tensor<T>>,
    shift: [i64; 3],
    context: Option<Tensor<T>>,
}

impl<T: Real> FrozenConditioning<T> {
    fn capture(c: &DitConditioning<'_, T>) -> Self {
        let v = |x: Option<Var<'_, T>>| x.map(|x| (*x.value()).clone());
        Self {
            anchor: (*c.anchor.value()).clone(),
            hke: v(c.hke),
            eme: v(c.eme),
            oee: v(c.oee),
            shift: c.oee_shift,
            context: v(c.context),
        }
    }

    fn bind<'g>(&self, s: &Session<'g, '_, T>) -> DitConditioning<'g, T> {
        let c = |x: &Option<Tensor<T>>| x.as_ref().map(|x| s.constant(x.clone()));
        DitConditioning {
            anchor: s.constant(self.anchor.clone()),
            hke: c(&self.hke),
            eme: c(&self.eme),
            oee: c(&self.oee),
            oee_shift: self.shift,
            context: c(&self.context),
        }
    }
}

pub(crate) fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

/// Progress callback for [`train`]: `(step, loss)`.
pub type StepHook<'a> = dyn FnMut(u64, f64) + 'a;

/// Build a model, pretrain and freeze the codec, then run
/// `cfg.train_steps` denoiser steps. Returns the model, its parameters, the
/// optimiser and the per-step losses.
pub fn train(
    dataset: &[ClipInputs],
    cfg: &RunConfig,
    hook: &mut StepHook<'_>,
) -> Result<(WorldModel, ParamStore<f32>, Adam<f32>, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = WorldModel::new(cfg, &mut store, &mut rng)?;
    let frames: Vec<Tensor<f32>> = dataset
        .iter()
        .map(|c| c.frames.clone().ok_or_else(|| Error::Invalid("training clip without frames".into())))
        .collect::<Result<_>>()?;
    pretrain_codec(&model.codec, &mut store, &frames, cfg.codec_steps, cfg.codec_lr)?;
    let prepared: Vec<PreparedClip<f32>> = dataset.iter().map(|c| model.prepare(&store, c)).collect::<Result<_>>()?;
    let mut adam = Adam::new(cfg.lr);
    adam.clip_norm = (cfg.clip_norm > 0.0).then_some(cfg.clip_norm);
    let mut losses = Vec::with_capacity(cfg.train_steps);
    for step in 0..cfg.train_steps as u64 {
        let loss = model.train_step(&mut store, &mut adam, &prepared, step)?;
        hook(step, loss);
        losses.push(loss);
    }
    Ok((model, store, adam, losses))
}
