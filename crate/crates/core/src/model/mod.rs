//! Latent diffusion world model.

pub mod checkpoint;
pub mod codec;
pub mod dit;
pub mod schedule;
pub mod world;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use codec::{pretrain_codec, Codec};
pub use dit::{adapter_residual, extend_sequence, fuse_hand_tokens, ContextEncoder, Dit, DitConditioning, DitConfig};
pub use schedule::{ancestral_step, forward_noising, noising_step, NoiseSchedule};
pub use world::{train, ActionScript, ClipInputs, PreparedClip, Streams, WorldModel};
