//! Procedural egocentric clips: a table, one object, a stick arm and a
//! moving head camera, rendered by a small software rasterizer.

pub mod arm;
pub mod clip;
pub mod raster;
pub mod scene;

pub use arm::{simulate_grasp, ArmSpec, GraspEvent, GraspState, HandState, R_GRASP};
pub use clip::{generate_clip, list_clip_dirs, load_windows, read_clip, window_starts, write_clip, Clip, WINDOW_STRIDE};
pub use raster::{render, render_frame, render_hand_map, render_static, Raster};
pub use scene::{generate_scene, look_at, ObjectPose, ObjectSpec, SceneSpec, Shape};
