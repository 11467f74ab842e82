//! Scripted clips: head motion, reach-grasp-carry-release arm script,
//! rendering of every stream, sliding windows and the on-disk layout.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arm::{simulate_grasp, ArmSpec, GraspEvent, GraspState, GRASP_LIFT};
use super::raster::{render, render_hand_map, LABEL_HAND, LABEL_OBJECT};
use super::scene::{generate_scene, look_at, SceneSpec, FOV_DEG};
use crate::camera::{
    read_intrinsics_csv, read_poses_csv, read_trajectory_csv, write_intrinsics_csv, write_poses_csv,
    write_trajectory_csv, Intrinsics, Pose, Trajectory,
};
use crate::error::{Error, Result};
use crate::model::{ActionScript, ClipInputs};
use crate::tensor::{read_tns, write_tns, Tensor};

/// Window stride used when cutting training sub-clips.
pub const WINDOW_STRIDE: usize = 5;

/// Script phase boundaries as fractions of the clip.
const REACH_END: f64 = 0.25;
const RELEASE_AT: f64 = 0.875;
const HOVER: f64 = 0.05;
const LIFT: f64 = 0.08;

/// One clip: every stream plus the ground truth the metrics need.
#[derive(Clone, Debug)]
pub struct Clip {
    pub seed: u64,
    /// Offset of this clip inside the generated source clip.
    pub start: usize,
    pub size: usize,
    /// `[L, 3, S, S]`.
    pub rgb: Tensor<f32>,
    /// `[L, 1, S, S]`.
    pub hand_maps: Tensor<f32>,
    /// `[L, 1, S, S]`.
    pub object_masks: Tensor<f32>,
    pub trajectory: Trajectory,
    /// Camera-to-world poses.
    pub world_poses: Vec<Pose>,
    pub intrinsics: Intrinsics,
    /// End-effector positions in world coordinates.
    pub end_effector: Vec<Vector3<f64>>,
    pub attached: Vec<bool>,
    pub events: Vec<(usize, GraspEvent)>,
}

fn smooth(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Scripted end-effector target and the release command at phase `s ∈ [0, 1]`.
fn script(s: f64, rest: Vector3<f64>, grasp: Vector3<f64>, carry: Vector3<f64>) -> (Vector3<f64>, bool) {
    let up = Vector3::z();
    let drop = grasp + Vector3::new(carry.x, carry.y, 0.0);
    if s <= REACH_END {
        let u = s / REACH_END;
        (rest.lerp(&grasp, smooth(u)) + up * HOVER * (PI * u).sin(), false)
    } else if s < RELEASE_AT - 1e-9 {
        let u = (s - REACH_END) / (RELEASE_AT - REACH_END);
        (grasp + Vector3::new(carry.x * u, carry.y * u, carry.z * (PI * u).sin()), false)
    } else {
        let u = (s - RELEASE_AT) / (1.0 - RELEASE_AT);
        (drop.lerp(&rest, smooth(u)) + up * HOVER * (PI * u).sin(), true)
    }
}

fn slice_frames(t: &Tensor<f32>, start: usize, len: usize) -> Tensor<f32> {
    let per: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = len;
    Tensor::from_vec(&shape, t.data()[start * per..(start + len) * per].to_vec()).expect("frame slice")
}

fn stack(frames: &[Tensor<f32>]) -> Tensor<f32> {
    let mut shape = vec![frames.len()];
    shape.extend_from_slice(frames[0].shape());
    let data = frames.iter().flat_map(|f| f.data().iter().copied()).collect();
    Tensor::from_vec(&shape, data).expect("frame stack")
}

/// Deterministic clip of `frames` frames at `size × size`.
pub fn generate_clip(seed: u64, frames: usize, size: usize) -> Result<Clip> {
    if frames < 2 || size < 4 {
        return Err(Error::Invalid(format!("clip needs L >= 2 and S >= 4, got L={frames} S={size}")));
    }
    let scene = generate_scene(seed);
    let arm = ArmSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut coef = |m: f64| Vector3::new(rng.random_range(-m..m), rng.random_range(-m..m), rng.random_range(-m..m) * 0.5);
    let (e1, e2, t1, t2) = (coef(0.04), coef(0.03), coef(0.05), coef(0.03));
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let carry = Vector3::new(side * rng.random_range(0.05..0.10), rng.random_range(-0.06..0.03), LIFT);

    let k = Intrinsics::from_fov(size, FOV_DEG);
    let rest = arm.shoulder + Vector3::new(-0.06, 0.20, -0.14);
    let grasp_pt = scene.object_pose.position + Vector3::new(0.0, 0.0, scene.object.shape.height() + GRASP_LIFT);

    let mut world = Vec::with_capacity(frames);
    let (mut rgb, mut hands, mut masks) = (Vec::new(), Vec::new(), Vec::new());
    let (mut ee, mut attached, mut events) = (Vec::new(), Vec::new(), Vec::new());
    let mut obj = scene.object_pose;
    let mut grasp = GraspState::default();
    for i in 0..frames {
        let s = i as f64 / (frames - 1) as f64;
        let cam = look_at(scene.eye + e1 * s + e2 * s * s, scene.target + t1 * s + t2 * s * s);
        let (target, open) = script(s, rest, grasp_pt, carry);
        let hand = arm.ik(&target);
        let (att, pose, ev) = simulate_grasp(&arm, &hand, &scene.object, &obj, &mut grasp, open);
        obj = pose;
        if let Some(ev) = ev {
            events.push((i, ev));
        }
        let r = render(&scene, &cam, &k, size, &obj, Some((&arm, &hand)));
        rgb.push(r.to_tensor());
        masks.push(r.mask(LABEL_OBJECT));
        hands.push(render_hand_map(&arm, &hand, &cam, &k, size));
        ee.push(arm.end_effector(&hand));
        attached.push(att);
        world.push(cam);
        debug_assert!(hands.last().unwrap().bit_eq(&r.mask(LABEL_HAND)));
    }
    Ok(Clip {
        seed,
        start: 0,
        size,
        rgb: stack(&rgb),
        hand_maps: stack(&hands),
        object_masks: stack(&masks),
        trajectory: Trajectory::from_world(&world)?,
        world_poses: world,
        intrinsics: k,
        end_effector: ee,
        attached,
        events,
    })
}

/// Start indices of length-`len` windows advancing by `stride`; the last
/// window is clamped to end at the final frame.
pub fn window_starts(total: usize, len: usize, stride: usize) -> Vec<usize> {
    if len == 0 || len > total || stride == 0 {
        return Vec::new();
    }
    let last = total - len;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().unwrap() != last {
        out.push(last);
    }
    out
}

/// The generator's own scene, for metrics that re-render the background.
pub fn scene_of(clip: &Clip) -> SceneSpec {
    generate_scene(clip.seed)
}

impl Clip {
    pub fn len(&self) -> usize {
        self.world_poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.world_poses.is_empty()
    }

    pub fn frame(&self, i: usize) -> Tensor<f32> {
        slice_frames(&self.rgb, i, 1).reshape(&[3, self.size, self.size]).expect("frame")
    }

    /// Sub-clip of `len` frames from `start`, trajectory re-based on its first frame.
    pub fn window(&self, start: usize, len: usize) -> Result<Clip> {
        if len == 0 || start + len > self.len() {
            return Err(Error::Invalid(format!("window {start}+{len} outside clip of {}", self.len())));
        }
        let world = self.world_poses[start..start + len].to_vec();
        Ok(Clip {
            seed: self.seed,
            start: self.start + start,
            size: self.size,
            rgb: slice_frames(&self.rgb, start, len),
            hand_maps: slice_frames(&self.hand_maps, start, len),
            object_masks: slice_frames(&self.object_masks, start, len),
            trajectory: Trajectory::from_world(&world)?,
            world_poses: world,
            intrinsics: self.intrinsics,
            end_effector: self.end_effector[start..start + len].to_vec(),
            attached: self.attached[start..start + len].to_vec(),
            events: self
                .events
                .iter()
                .filter(|(f, _)| (start..start + len).contains(f))
                .map(|&(f, e)| (f - start, e))
                .collect(),
        })
    }

    pub fn windows(&self, len: usize) -> Result<Vec<Clip>> {
        window_starts(self.len(), len, WINDOW_STRIDE)
            .into_iter()
            .map(|s| self.window(s, len))
            .collect()
    }

    pub fn actions(&self) -> ActionScript {
        ActionScript {
            hand_maps: self.hand_maps.clone(),
            trajectory: self.trajectory.clone(),
            intrinsics: self.intrinsics,
        }
    }

    /// Model inputs; the object image is the first frame masked to the object.
    pub fn inputs(&self) -> ClipInputs {
        let first = self.frame(0);
        let n = self.size * self.size;
        let mask = &self.object_masks.data()[..n];
        let mut object = first.clone();
        for (i, v) in object.data_mut().iter_mut().enumerate() {
            *v *= mask[i % n];
        }
        ClipInputs {
            first_frame: first,
            object_image: object,
            actions: self.actions(),
            frames: Some(self.rgb.clone()),
        }
    }
}

/// Files of one clip directory.
pub const RGB_FILE: &str = "rgb.tns";
pub const HANDS_FILE: &str = "hands.tns";
pub const MASKS_FILE: &str = "masks.tns";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const INTRINSICS_FILE: &str = "intrinsics.csv";
pub const WORLD_FILE: &str = "world.csv";
pub const EE_FILE: &str = "ee.csv";
pub const META_FILE: &str = "meta.txt";

fn join<T: ToString>(v: impl IntoIterator<Item = T>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Write `clip` into `dir`. `window_len` adds the sliding-window
/// enumeration to the metadata.
pub fn write_clip(dir: impl AsRef<Path>, clip: &Clip, window_len: Option<usize>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_tns(dir.join(RGB_FILE), &clip.rgb)?;
    write_tns(dir.join(HANDS_FILE), &clip.hand_maps)?;
    write_tns(dir.join(MASKS_FILE), &clip.object_masks)?;
    write_trajectory_csv(dir.join(TRAJECTORY_FILE), &clip.trajectory)?;
    write_poses_csv(dir.join(WORLD_FILE), &clip.world_poses)?;
    write_intrinsics_csv(dir.join(INTRINSICS_FILE), &clip.intrinsics)?;
    let mut ee = String::from("frame,x,y,z\n");
    for (i, p) in clip.end_effector.iter().enumerate() {
        let _ = writeln!(ee, "{i},{},{},{}", p.x, p.y, p.z);
    }
    let path = dir.join(EE_FILE);
    std::fs::write(&path, ee).map_err(|e| Error::io(&path, e))?;

    let mut meta = String::new();
    let _ = writeln!(meta, "seed={}", clip.seed);
    let _ = writeln!(meta, "frames={}", clip.len());
    let _ = writeln!(meta, "size={}", clip.size);
    let _ = writeln!(meta, "start={}", clip.start);
    let _ = writeln!(meta, "grasp={}", join(clip.events.iter().map(|(f, e)| format!("{f}:{e}"))));
    let _ = writeln!(meta, "attached={}", join(clip.attached.iter().map(|&a| a as u8)));
    if let Some(w) = window_len {
        let _ = writeln!(meta, "window_len={w}");
        let _ = writeln!(meta, "window_stride={WINDOW_STRIDE}");
        let _ = writeln!(meta, "windows={}", join(window_starts(clip.len(), w, WINDOW_STRIDE)));
    }
    let path = dir.join(META_FILE);
    std::fs::write(&path, meta).map_err(|e| Error::io(&path, e))
}

pub fn read_meta(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::data(path, format!("expected key=value, got `{line}`")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn meta_num<T: std::str::FromStr>(meta: &BTreeMap<String, String>, path: &Path, key: &str) -> Result<T> {
    meta.get(key)
        .ok_or_else(|| Error::data(path, format!("missing `{key}`")))?
        .parse()
        .map_err(|_| Error::data(path, format!("bad `{key}`")))
}

fn read_ee(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let v: std::result::Result<Vec<f64>, _> = line.split(',').map(|x| x.trim().parse::<f64>()).collect();
        match v {
            Ok(v) if v.len() == 4 => out.push(Vector3::new(v[1], v[2], v[3])),
            _ => return Err(Error::data(path, format!("bad row `{line}`"))),
        }
    }
    Ok(out)
}

pub fn read_clip(dir: impl AsRef<Path>) -> Result<Clip> {
    let dir = dir.as_ref();
    let mpath = dir.join(META_FILE);
    let meta = read_meta(&mpath)?;
    let frames: usize = meta_num(&meta, &mpath, "frames")?;
    let size: usize = meta_num(&meta, &mpath, "size")?;
    let rgb: Tensor<f32> = read_tns(dir.join(RGB_FILE))?;
    let hand_maps: Tensor<f32> = read_tns(dir.join(HANDS_FILE))?;
    let object_masks: Tensor<f32> = read_tns(dir.join(MASKS_FILE))?;
    for (name, t, c) in [(RGB_FILE, &rgb, 3), (HANDS_FILE, &hand_maps, 1), (MASKS_FILE, &object_masks, 1)] {
        if t.shape() != [frames, c, size, size] {
            return Err(Error::data(dir.join(name), format!("shape {:?}, meta says L={frames} S={size}", t.shape())));
        }
    }
    let trajectory = read_trajectory_csv(dir.join(TRAJECTORY_FILE))?;
    let world_poses = read_poses_csv(dir.join(WORLD_FILE))?;
    let end_effector = read_ee(&dir.join(EE_FILE))?;
    let attached: Vec<bool> = meta
        .get("attached")
        .map(|s| s.split(',').filter(|x| !x.is_empty()).map(|x| x.trim() == "1").collect())
        .unwrap_or_default();
    let mut events = Vec::new();
    for item in meta.get("grasp").map(String::as_str).unwrap_or("").split(',').filter(|x| !x.is_empty()) {
        let bad = || Error::data(&mpath, format!("bad grasp event `{item}`"));
        let (f, e) = item.split_once(':').ok_or_else(bad)?;
        let ev = match e {
            "attach" => GraspEvent::Attach,
            "release" => GraspEvent::Release,
            _ => return Err(bad()),
        };
        events.push((f.parse().map_err(|_| bad())?, ev));
    }
    if trajectory.len() != frames || world_poses.len() != frames || end_effector.len() != frames || attached.len() != frames
    {
        return Err(Error::data(dir, format!("stream lengths disagree with L={frames}")));
    }
    Ok(Clip {
        seed: meta_num(&meta, &mpath, "seed")?,
        start: meta_num(&meta, &mpath, "start")?,
        size,
        rgb,
        hand_maps,
        object_masks,
        trajectory,
        world_poses,
        intrinsics: read_intrinsics_csv(dir.join(INTRINSICS_FILE))?,
        end_effector,
        attached,
        events,
    })
}

/// Clip directories directly under `root`, sorted by name.
pub fn list_clip_dirs(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    let rd = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(META_FILE).is_file())
        .collect();
    out.sort();
    Ok(out)
}

/// Every clip under `root` cut into length-`len` windows.
pub fn load_windows(root: impl AsRef<Path>, len: usize) -> Result<Vec<Clip>> {
    let root = root.as_ref();
    let dirs = list_clip_dirs(root)?;
    if dirs.is_empty() {
        return Err(Error::data(root, "no clip directories"));
    }
    let mut out = Vec::new();
    for d in dirs {
        let c = read_clip(&d)?;
        if c.len() < len {
            return Err(Error::data(&d, format!("clip has {} frames, need {len}", c.len())));
        }
        out.extend(c.windows(len)?);
    }
    Ok(out)
}
