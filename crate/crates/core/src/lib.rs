//! Desk-scale egocentric hand-object world model.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] / [`autodiff`]: dense row-major tensors, the layer kernels the
//!   encoders need, and a tape-based reverse-mode differentiator over them.
//! - [`camera`]: intrinsics, first-frame-relative poses, Plücker ray fields and
//!   similarity alignment of trajectories.
//! - [`embeddings`]: the hand-kinematic, ego-motion and object-entity encoders.
//! - [`model`]: noise schedule, latent codec, the DiT denoiser with its three
//!   conditioning paths, training and rollout.
//! - [`synth`]: procedural egocentric clips (scene, stick arm, grasping).
//! - [`eval`]: frame, object, hand and trajectory metrics.
//! - [`audit`]: analytic shape inference for full-resolution configurations.
//!
//! Data-parallel kernels run on rayon when the `parallel` feature is enabled;
//! see [`par`] for the runtime switch.

pub mod audit;
pub mod autodiff;
pub mod camera;
pub mod config;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod par;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
