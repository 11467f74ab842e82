//! `egowm` command-line driver: data generation, shape audits, training,
//! rollouts and evaluation.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use egowm::audit::{audit, Scale};
use egowm::autodiff::{Adam, ParamStore};
use egowm::config::RunConfig;
use egowm::eval::{evaluate_clip, object_mask, EvalOptions, MetricReport, PoseSearch};
use egowm::model::{load_checkpoint, pretrain_codec, save_checkpoint, PreparedClip, WorldModel};
use egowm::synth::clip::{scene_of, META_FILE};
use egowm::synth::{generate_clip, list_clip_dirs, load_windows, read_clip, write_clip, Clip};
use egowm::tensor::Tensor;

const CONFIG_FILE: &str = "config.txt";
const CHECKPOINT_DIR: &str = "checkpoint";
const LOSS_FILE: &str = "loss.csv";

/// Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "egowm", version, about = "Desk-scale egocentric hand-object world model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic clips in the clip directory layout.
    GenData(GenData),
    /// Print encoder output shapes and compare them with the expected values.
    ShapeAudit(ShapeAuditArgs),
    /// Train the world model on a directory of clips.
    Train(Train),
    /// Roll a trained model out over one clip's action script.
    Rollout(Rollout),
    /// Score generated clips against ground truth.
    Eval(Eval),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    clips: usize,
    #[arg(long, default_value_t = 9)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Window length enumerated in each clip's metadata (stride 5).
    #[arg(long, default_value_t = 9)]
    window: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value config file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, base: RunConfig) -> Result<RunConfig, CliError> {
        let mut cfg = base;
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p).map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
            cfg.apply(&text).map_err(|e| CliError::usage(e.to_string()))?;
        }
        cfg.apply(&self.overrides.join("\n")).map_err(|e| CliError::usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct ShapeAuditArgs {
    #[arg(long, default_value = "paper")]
    scale: String,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct Train {
    /// Directory of clip directories.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint directory instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct Rollout {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Clip directory providing the first frame and the action script.
    #[arg(long)]
    clip: PathBuf,
    /// Sampler iterations; defaults to the checkpoint's `steps`.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// First frame of the window to roll out when the clip is longer than
    /// the model horizon.
    #[arg(long)]
    start: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Also export every predicted frame as a PNG.
    #[arg(long)]
    png: bool,
}

#[derive(Args)]
struct Eval {
    /// Ground-truth clip directory, or a directory of them.
    #[arg(long)]
    gt: PathBuf,
    /// Generated clip directory, or a directory of them with matching names.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Skip the brute-force pose search (ATE, RRE and RPE become `nc`).
    #[arg(long)]
    no_poses: bool,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    error: anyhow::Error,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            error: anyhow!(msg.into()),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.chain().find_map(|e| e.downcast_ref::<egowm::Error>()) {
            Some(egowm::Error::Numerical(_)) => EXIT_NUMERICAL,
            Some(egowm::Error::Config(_)) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Self { code, error }
    }
}

impl From<egowm::Error> for CliError {
    fn from(e: egowm::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CmdResult = std::result::Result<(), CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_USAGE);
    }
    let res = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::ShapeAudit(a) => shape_audit(a),
        Command::Train(a) => train(a),
        Command::Rollout(a) => rollout(a),
        Command::Eval(a) => eval(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}

/// `EGOWM_THREADS` caps the rayon pool; 1 also switches kernels to the
/// sequential path.
fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("EGOWM_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().with_context(|| format!("EGOWM_THREADS must be a positive integer, got `{v}`"))?;
    if n == 0 {
        bail!("EGOWM_THREADS must be positive");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    egowm::par::set_parallel(n > 1);
    Ok(())
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("cannot create {}", p.display()))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).with_context(|| format!("cannot write {}", p.display()))
}

fn clip_name(i: usize) -> String {
    format!("clip_{i:04}")
}

fn gen_data(a: GenData) -> CmdResult {
    if a.clips == 0 {
        return Err(CliError::usage("--clips must be at least 1"));
    }
    if a.window == 0 || a.window > a.frames {
        return Err(CliError::usage(format!("--window must be in 1..={}", a.frames)));
    }
    create_dir(&a.out)?;
    (0..a.clips).into_par_iter().try_for_each(|i| -> Result<()> {
        let seed = a.seed + i as u64;
        let clip = generate_clip(seed, a.frames, a.size)?;
        write_clip(a.out.join(clip_name(i)), &clip, Some(a.window))?;
        Ok(())
    })?;
    let mut cfg = String::new();
    let _ = writeln!(cfg, "seed={}\nclips={}\nframes={}\nsize={}\nwindow={}", a.seed, a.clips, a.frames, a.size, a.window);
    write_text(&a.out.join(CONFIG_FILE), &cfg)?;
    println!("wrote {} clips to {}", a.clips, a.out.display());
    Ok(())
}

fn shape_audit(a: ShapeAuditArgs) -> CmdResult {
    let scale: Scale = a.scale.parse().map_err(CliError::usage)?;
    let cfg = a.config.resolve(RunConfig::default())?;
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let report = audit(scale, &cfg)?;
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_NUMERICAL,
            error: anyhow!("shape audit found mismatches"),
        })
    }
}

struct TrainState {
    model: WorldModel,
    store: ParamStore<f32>,
    adam: Adam<f32>,
    step: u64,
}

fn fresh_state(cfg: &RunConfig, clips: &[Clip]) -> Result<TrainState> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = WorldModel::new(cfg, &mut store, &mut rng)?;
    let frames: Vec<Tensor<f32>> = clips.iter().map(|c| c.rgb.clone()).collect();
    let t0 = Instant::now();
    let losses = pretrain_codec(&model.codec, &mut store, &frames, cfg.codec_steps, cfg.codec_lr)?;
    eprintln!(
        "codec: {} steps, final loss {:.5} ({:.1}s)",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        t0.elapsed().as_secs_f64()
    );
    let mut adam = Adam::new(cfg.lr);
    adam.clip_norm = (cfg.clip_norm > 0.0).then_some(cfg.clip_norm);
    Ok(TrainState { model, store, adam, step: 0 })
}

fn train(a: Train) -> CmdResult {
    let (cfg, resumed) = match &a.resume {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            // Only the step budget and checkpoint cadence may change on resume.
            let cfg = a.config.resolve(ck.config.clone())?;
            if cfg.model_hash() != ck.config.model_hash() || cfg.lr != ck.config.lr || cfg.seed != ck.config.seed {
                return Err(CliError::usage("--resume: only train_steps and checkpoint_every may differ from the checkpoint"));
            }
            let adam = ck.adam.ok_or_else(|| anyhow!("checkpoint {} has no optimiser state", dir.display()))?;
            (cfg, Some(TrainState { model: ck.model, store: ck.store, adam, step: ck.step }))
        }
        None => (a.config.resolve(RunConfig::default())?, None),
    };
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let clips = load_windows(&a.data, cfg.frames)?;
    if clips.is_empty() {
        return Err(anyhow!("no {}-frame windows under {}", cfg.frames, a.data.display()).into());
    }
    if let Some(c) = clips.iter().find(|c| c.size != cfg.size) {
        return Err(anyhow!("clip size {} does not match config size {}", c.size, cfg.size).into());
    }
    let mut st = match resumed {
        Some(st) => st,
        None => fresh_state(&cfg, &clips)?,
    };
    create_dir(&a.out)?;
    let mut resolved = cfg.clone();
    resolved.data = Some(a.data.clone());
    resolved.out = Some(a.out.clone());
    resolved.write(a.out.join(CONFIG_FILE))?;

    let prepared: Vec<PreparedClip<f32>> = clips.iter().map(|c| st.model.prepare(&st.store, &c.inputs())).collect::<egowm::Result<_>>()?;
    let loss_path = a.out.join(LOSS_FILE);
    let append = a.resume.is_some() && loss_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&loss_path)
        .with_context(|| format!("cannot open {}", loss_path.display()))?;
    if !append {
        writeln!(log, "step,loss").context("writing loss log")?;
    }
    let ckpt = a.out.join(CHECKPOINT_DIR);
    let total = cfg.train_steps as u64;
    let t0 = Instant::now();
    while st.step < total {
        let loss = st.model.train_step(&mut st.store, &mut st.adam, &prepared, st.step)?;
        writeln!(log, "{},{loss}", st.step).context("writing loss log")?;
        st.step += 1;
        if st.step % 100 == 0 || st.step == total {
            eprintln!("step {}/{total} loss {loss:.5} ({:.1}s)", st.step, t0.elapsed().as_secs_f64());
        }
        if cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every as u64 == 0 && st.step < total {
            save_checkpoint(&ckpt, &cfg, &st.store, Some(&st.adam), st.step)?;
        }
    }
    save_checkpoint(&ckpt, &cfg, &st.store, Some(&st.adam), st.step)?;
    println!("checkpoint at step {} in {}", st.step, ckpt.display());
    Ok(())
}

fn write_png(path: &Path, frame: &[f32], size: usize) -> Result<()> {
    let plane = size * size;
    let mut img = image::RgbImage::new(size as u32, size as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        for c in 0..3 {
            px.0[c] = (frame[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    img.save(path).with_context(|| format!("cannot write {}", path.display()))
}

fn rollout(a: Rollout) -> CmdResult {
    let ck = load_checkpoint(&a.checkpoint)?;
    let cfg = ck.config.clone();
    let steps = a.steps.unwrap_or(cfg.steps);
    let src = read_clip(&a.clip)?;
    let clip = match a.start {
        Some(s) => src.window(s, cfg.frames)?,
        None if src.len() == cfg.frames => src,
        None => {
            return Err(anyhow!(
                "horizon mismatch: clip has {} frames, model horizon is {} (use --start to pick a window)",
                src.len(),
                cfg.frames
            )
            .into())
        }
    };
    if clip.size != cfg.size {
        return Err(anyhow!("clip size {} does not match model size {}", clip.size, cfg.size).into());
    }
    let mut inputs = clip.inputs();
    inputs.frames = None;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let t0 = Instant::now();
    let rgb = ck.model.sample_rollout(&ck.store, &inputs, steps, &mut rng)?;
    eprintln!("rollout: {steps} sampler steps in {:.1}s", t0.elapsed().as_secs_f64());

    // Same layout as a clip: predicted frames, the conditioning streams
    // copied from the source, and object masks classified from the frames.
    let scene = scene_of(&clip);
    let (n, s) = (clip.len(), clip.size);
    let per = 3 * s * s;
    let mut masks = Vec::with_capacity(n * s * s);
    for i in 0..n {
        let f = Tensor::from_vec(&[3, s, s], rgb.data()[i * per..(i + 1) * per].to_vec())?;
        masks.extend(object_mask(&f, &scene)?.data.iter().map(|&b| if b { 1.0f32 } else { 0.0 }));
    }
    let pred = Clip {
        rgb: rgb.clone(),
        object_masks: Tensor::from_vec(&[n, 1, s, s], masks)?,
        ..clip
    };
    write_clip(&a.out, &pred, None)?;
    let mut resolved = cfg.clone();
    resolved.steps = steps;
    resolved.out = Some(a.out.clone());
    let mut text = resolved.to_text();
    let _ = writeln!(text, "# rollout checkpoint={} clip={} seed={}", a.checkpoint.display(), a.clip.display(), a.seed);
    write_text(&a.out.join(CONFIG_FILE), &text)?;
    if a.png {
        for i in 0..n {
            write_png(&a.out.join(format!("frame_{i:03}.png")), &rgb.data()[i * per..(i + 1) * per], s)?;
        }
    }
    println!("wrote {n} frames to {}", a.out.display());
    Ok(())
}

fn is_clip_dir(p: &Path) -> bool {
    p.join(META_FILE).is_file()
}

/// `(name, gt dir, pred dir)` pairs; single clip directories pair directly,
/// roots pair by directory name.
fn pair_dirs(gt: &Path, pred: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if is_clip_dir(gt) || is_clip_dir(pred) {
        if !(is_clip_dir(gt) && is_clip_dir(pred)) {
            bail!("layout mismatch: {} and {} must both be clip directories", gt.display(), pred.display());
        }
        let name = gt.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "clip".into());
        return Ok(vec![(name, gt.to_path_buf(), pred.to_path_buf())]);
    }
    let names = |root: &Path| -> Result<Vec<String>> {
        Ok(list_clip_dirs(root)?
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect())
    };
    let (g, p) = (names(gt)?, names(pred)?);
    if g.is_empty() {
        bail!("no clip directories under {}", gt.display());
    }
    if g != p {
        bail!("layout mismatch: clip names differ between {} and {}", gt.display(), pred.display());
    }
    Ok(g.into_iter().map(|n| (n.clone(), gt.join(&n), pred.join(&n))).collect())
}

fn eval(a: Eval) -> CmdResult {
    let pairs = pair_dirs(&a.gt, &a.pred)?;
    let opts = EvalOptions {
        poses: !a.no_poses,
        search: PoseSearch::default(),
    };
    let clips = pairs
        .par_iter()
        .map(|(name, g, p)| -> Result<_> {
            let gt = read_clip(g)?;
            let pred = read_clip(p)?;
            if pred.rgb.shape() != gt.rgb.shape() {
                bail!("layout mismatch for {name}: prediction {:?} vs ground truth {:?}", pred.rgb.shape(), gt.rgb.shape());
            }
            Ok(evaluate_clip(name, &gt, &pred.rgb, &opts)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = MetricReport { clips };
    create_dir(&a.out)?;
    write_text(&a.out.join("report.csv"), &report.to_csv())?;
    write_text(&a.out.join("summary.txt"), &report.summary())?;
    let s = opts.search;
    let cfg = format!(
        "gt={}\npred={}\nposes={}\nrot_step={}\ntrans_step={}\nhalf_steps={}\nrefinements={}\nshrink={}\nmse_threshold={}\n",
        a.gt.display(),
        a.pred.display(),
        opts.poses,
        s.rot_step,
        s.trans_step,
        s.half_steps,
        s.refinements,
        s.shrink,
        s.mse_threshold
    );
    write_text(&a.out.join(CONFIG_FILE), &cfg)?;
    print!("{}", report.to_csv());
    Ok(())
}
