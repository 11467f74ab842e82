//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error so that typos cannot silently fall back to defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::camera::RayConvention;
use crate::error::{Error, Result};

/// Where the object-entity stream sits relative to the main token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RopeShift {
    /// One full grid extent along both spatial axes.
    Auto,
    Fixed([i64; 3]),
}

impl RopeShift {
    pub fn resolve(self, grid: [usize; 3]) -> [i64; 3] {
        match self {
            RopeShift::Auto => [0, grid[1] as i64, grid[2] as i64],
            RopeShift::Fixed(s) => s,
        }
    }
}

impl std::fmt::Display for RopeShift {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RopeShift::Auto => f.write_str("auto"),
            RopeShift::Fixed([a, b, c]) => write!(f, "{a},{b},{c}"),
        }
    }
}

impl FromStr for RopeShift {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(RopeShift::Auto);
        }
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(format!("expected `auto` or `t,h,w`, got `{s}`"));
        }
        let mut out = [0i64; 3];
        for (o, p) in out.iter_mut().zip(&parts) {
            *o = p.parse().map_err(|_| format!("bad integer `{p}`"))?;
        }
        Ok(RopeShift::Fixed(out))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Frames per training window (L).
    pub frames: usize,
    /// Square frame size in pixels (S).
    pub size: usize,
    /// Codec latent channels. Kept well below `width / 4` so one 2×2 patch
    /// token leaves the denoiser spare width.
    pub latent_channels: usize,
    /// Divisor applied to the hidden channel counts of the encoder tables.
    pub channel_div: usize,
    pub norm_groups: usize,
    /// Token width d.
    pub width: usize,
    pub blocks: usize,
    /// Number of leading blocks that receive ego-motion adapters (D).
    pub adapter_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub context_tokens: usize,
    pub gate_init: f64,
    pub guidance: f64,
    pub rope_shift: RopeShift,
    pub ray_convention: RayConvention,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Sampler iterations used by rollouts.
    pub steps: usize,
    pub lr: f64,
    pub train_steps: usize,
    pub batch: usize,
    pub codec_steps: usize,
    pub codec_lr: f64,
    pub clip_norm: f64,
    pub checkpoint_every: usize,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 9,
            size: 32,
            latent_channels: 4,
            channel_div: 2,
            norm_groups: 4,
            width: 64,
            blocks: 4,
            adapter_depth: 2,
            heads: 2,
            mlp_ratio: 4,
            context_tokens: 4,
            gate_init: 0.0,
            guidance: 1.0,
            rope_shift: RopeShift::Auto,
            ray_convention: RayConvention::Literal,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            steps: 50,
            lr: 1e-5,
            train_steps: 1000,
            batch: 2,
            codec_steps: 1500,
            codec_lr: 2e-3,
            clip_norm: 1.0,
            checkpoint_every: 0,
            data: None,
            out: None,
        }
    }
}

const KEYS: &[&str] = &[
    "seed",
    "frames",
    "size",
    "latent_channels",
    "channel_div",
    "norm_groups",
    "width",
    "blocks",
    "adapter_depth",
    "heads",
    "mlp_ratio",
    "context_tokens",
    "gate_init",
    "guidance",
    "rope_shift",
    "ray_convention",
    "diffusion_steps",
    "beta_start",
    "beta_end",
    "steps",
    "lr",
    "train_steps",
    "batch",
    "codec_steps",
    "codec_lr",
    "clip_norm",
    "checkpoint_every",
    "data",
    "out",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

impl RunConfig {
    /// Configuration used for the two-clip overfitting run: same model, a
    /// larger learning rate and a fixed step budget.
    pub fn overfit() -> Self {
        Self {
            lr: 1e-3,
            train_steps: 3000,
            ..Self::default()
        }
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "frames" => self.frames = parse(key, v)?,
            "size" => self.size = parse(key, v)?,
            "latent_channels" => self.latent_channels = parse(key, v)?,
            "channel_div" => self.channel_div = parse(key, v)?,
            "norm_groups" => self.norm_groups = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "blocks" => self.blocks = parse(key, v)?,
            "adapter_depth" => self.adapter_depth = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, v)?,
            "context_tokens" => self.context_tokens = parse(key, v)?,
            "gate_init" => self.gate_init = parse(key, v)?,
            "guidance" => self.guidance = parse(key, v)?,
            "rope_shift" => self.rope_shift = v.parse().map_err(|e| Error::Config(format!("rope_shift: {e}")))?,
            "ray_convention" => {
                self.ray_convention = v.parse().map_err(|e| Error::Config(format!("ray_convention: {e}")))?
            }
            "diffusion_steps" => self.diffusion_steps = parse(key, v)?,
            "beta_start" => self.beta_start = parse(key, v)?,
            "beta_end" => self.beta_end = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "train_steps" => self.train_steps = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "codec_steps" => self.codec_steps = parse(key, v)?,
            "codec_lr" => self.codec_lr = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "data" => self.data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out" => self.out = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parse `text` on top of the defaults and validate the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Apply `key=value` lines from `text` over the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.frames < 5 || (self.frames - 1) % 4 != 0 {
            return fail(format!("frames must be 4k+1 with k ≥ 1, got {}", self.frames));
        }
        if self.size < 16 || self.size % 16 != 0 {
            return fail(format!("size must be a multiple of 16, got {}", self.size));
        }
        if self.channel_div == 0 || 16 % self.channel_div != 0 {
            return fail(format!("channel_div must divide 16, got {}", self.channel_div));
        }
        if self.heads == 0 || self.width % self.heads != 0 || (self.width / self.heads) % 2 != 0 {
            return fail(format!("width {} must split into {} heads of even width", self.width, self.heads));
        }
        if self.adapter_depth == 0 || self.adapter_depth > self.blocks {
            return fail(format!("adapter_depth must be in 1..={}, got {}", self.blocks, self.adapter_depth));
        }
        if self.latent_channels == 0 || self.context_tokens == 0 || self.mlp_ratio == 0 || self.batch == 0 {
            return fail("latent_channels, context_tokens, mlp_ratio and batch must be positive".into());
        }
        if self.norm_groups == 0 {
            return fail("norm_groups must be positive".into());
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return fail(format!("need 0 < beta_start ≤ beta_end < 1, got {} {}", self.beta_start, self.beta_end));
        }
        if self.diffusion_steps == 0 || self.steps > self.diffusion_steps {
            return fail(format!("steps {} must not exceed diffusion_steps {}", self.steps, self.diffusion_steps));
        }
        if !(self.lr > 0.0) || !(self.codec_lr > 0.0) {
            return fail("learning rates must be positive".into());
        }
        Ok(())
    }

    /// Every key in a fixed order, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("seed", self.seed.to_string());
        put("frames", self.frames.to_string());
        put("size", self.size.to_string());
        put("latent_channels", self.latent_channels.to_string());
        put("channel_div", self.channel_div.to_string());
        put("norm_groups", self.norm_groups.to_string());
        put("width", self.width.to_string());
        put("blocks", self.blocks.to_string());
        put("adapter_depth", self.adapter_depth.to_string());
        put("heads", self.heads.to_string());
        put("mlp_ratio", self.mlp_ratio.to_string());
        put("context_tokens", self.context_tokens.to_string());
        put("gate_init", self.gate_init.to_string());
        put("guidance", self.guidance.to_string());
        put("rope_shift", self.rope_shift.to_string());
        put("ray_convention", self.ray_convention.to_string());
        put("diffusion_steps", self.diffusion_steps.to_string());
        put("beta_start", self.beta_start.to_string());
        put("beta_end", self.beta_end.to_string());
        put("steps", self.steps.to_string());
        put("lr", self.lr.to_string());
        put("train_steps", self.train_steps.to_string());
        put("batch", self.batch.to_string());
        put("codec_steps", self.codec_steps.to_string());
        put("codec_lr", self.codec_lr.to_string());
        put("clip_norm", self.clip_norm.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("data", path(&self.data));
        put("out", path(&self.out));
        s
    }

    /// SHA-256 over the architecture-relevant keys, hex encoded.
    ///
    /// Paths and step budgets are left out so a checkpoint stays loadable
    /// when only those change.
    pub fn model_hash(&self) -> String {
        const MODEL_KEYS: &[&str] = &[
            "frames",
            "size",
            "latent_channels",
            "channel_div",
            "norm_groups",
            "width",
            "blocks",
            "adapter_depth",
            "heads",
            "mlp_ratio",
            "context_tokens",
            "rope_shift",
            "ray_convention",
            "diffusion_steps",
            "beta_start",
            "beta_end",
        ];
        let text = self.to_text();
        let mut h = Sha256::new();
        for line in text.lines() {
            let key = line.split('=').next().unwrap_or("");
            if MODEL_KEYS.contains(&key) {
                h.update(line.as_bytes());
                h.update(b"\n");
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Latent grid `(T_lat, h, w)` implied by the frame count and size.
    pub fn latent_grid(&self) -> [usize; 3] {
        [(self.frames - 1) / 4 + 1, self.size / 8, self.size / 8]
    }

    /// Token grid after the `(1,2,2)` patchifier.
    pub fn token_grid(&self) -> [usize; 3] {
        let [t, h, w] = self.latent_grid();
        [t, h / 2, w / 2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_text() {
        let mut cfg = RunConfig::default();
        cfg.set("lr", "0.002").unwrap();
        cfg.set("rope_shift", "1,2,3").unwrap();
        cfg.set("out", "/tmp/x").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::keys().len(), cfg.to_text().lines().count());
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse("seed=1\nlearning_rate=3\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn defaults() {
        let cfg = RunConfig::parse("# nothing\n\n").unwrap();
        assert_eq!(cfg.steps, 50);
        assert_eq!(cfg.lr, 1e-5);
        assert_eq!(cfg.guidance, 1.0);
        assert_eq!(cfg.adapter_depth, cfg.blocks / 2);
        assert_eq!(cfg.latent_grid(), [3, 4, 4]);
        assert_eq!(cfg.rope_shift.resolve(cfg.token_grid()), [0, 2, 2]);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse("frames=8").is_err());
        assert!(RunConfig::parse("adapter_depth=5").is_err());
        assert!(RunConfig::parse("heads=3").is_err());
        assert!(RunConfig::parse("seed").is_err());
    }

    #[test]
    fn hash_ignores_paths() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = Some("/elsewhere".into());
        b.train_steps = 7;
        assert_eq!(a.model_hash(), b.model_hash());
        b.width = 32;
        assert_ne!(a.model_hash(), b.model_hash());
    }
}
