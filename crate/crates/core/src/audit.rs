//! Shape audit of the conditioning encoders. At paper scale the analytic
//! shapes are compared with the reference values; at desk scale they are
//! compared with the shapes an executed forward pass actually produces.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Session};
use crate::config::RunConfig;
use crate::embeddings::EncoderConfig;
use crate::error::Result;
use crate::model::codec::{encoder_chain, latent_frames, TEMPORAL_STRIDE};
use crate::model::WorldModel;
use crate::tensor::{ShapeTrace, Tensor};

/// Reference input geometry: 81 frames at 480×480.
pub const PAPER_FRAMES: usize = 81;
pub const PAPER_SIZE: usize = 480;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Paper,
    Desk,
}

impl std::str::FromStr for Scale {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            _ => Err(format!("unknown scale `{s}`, expected paper or desk")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditLine {
    pub name: &'static str,
    pub analytic: Vec<usize>,
    pub expected: Vec<usize>,
}

impl AuditLine {
    pub fn ok(&self) -> bool {
        self.analytic == self.expected
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeAudit {
    pub scale: Scale,
    pub lines: Vec<AuditLine>,
}

fn fmt_shape(s: &[usize]) -> String {
    let parts: Vec<String> = s.iter().map(|d| d.to_string()).collect();
    if s.len() == 1 {
        parts[0].clone()
    } else {
        format!("({})", parts.join(","))
    }
}

impl ShapeAudit {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(AuditLine::ok)
    }

    pub fn get(&self, name: &str) -> Option<&AuditLine> {
        self.lines.iter().find(|l| l.name == name)
    }

    pub fn render(&self) -> String {
        let against = match self.scale {
            Scale::Paper => "reference",
            Scale::Desk => "executed",
        };
        let mut s = String::new();
        for l in &self.lines {
            let _ = writeln!(
                s,
                "{:<18} {:<18} {against} {:<18} {}",
                l.name,
                fmt_shape(&l.analytic),
                fmt_shape(&l.expected),
                if l.ok() { "ok" } else { "MISMATCH" }
            );
        }
        let _ = writeln!(s, "result={}", if self.passed() { "pass" } else { "fail" });
        s
    }
}

struct Analytic {
    hke: [usize; 4],
    reference: [usize; 4],
    eme_down: [usize; 4],
    eme: [usize; 4],
    oee_latent: [usize; 4],
    oee: [usize; 4],
}

fn analytic(enc: &EncoderConfig, frames: usize, size: usize) -> Result<Analytic> {
    let t_lat = latent_frames(frames);
    let oee_latent = ShapeTrace::run(&encoder_chain(enc.latent_channels), [3 * TEMPORAL_STRIDE, t_lat, size, size])?.output();
    Ok(Analytic {
        hke: ShapeTrace::run(&enc.hke_chain(), [3, frames, size, size])?.output(),
        reference: ShapeTrace::run(&enc.ref_chain(), [3, 1, size, size])?.output(),
        eme_down: ShapeTrace::run(&enc.eme_down_chain(), [6, frames, size, size])?.output(),
        eme: ShapeTrace::run(&enc.eme_chain(), [6, frames, size, size])?.output(),
        oee: ShapeTrace::run(&[enc.oee_patchify()], oee_latent)?.output(),
        oee_latent,
    })
}

fn tokens(s: [usize; 4]) -> usize {
    s[1] * s[2] * s[3]
}

/// `[C, 1, H, W]` printed as `(H, W, C)`.
fn hwc(s: [usize; 4]) -> Vec<usize> {
    vec![s[2], s[3], s[0]]
}

fn lines(a: &Analytic, e: &Analytic) -> Vec<AuditLine> {
    let l = |name, x: Vec<usize>, y: Vec<usize>| AuditLine {
        name,
        analytic: x,
        expected: y,
    };
    vec![
        l("hke", a.hke.to_vec(), e.hke.to_vec()),
        l("hke_tokens", vec![tokens(a.hke)], vec![tokens(e.hke)]),
        l("ref_pyramid", hwc(a.reference), hwc(e.reference)),
        l("eme_downsampler", a.eme_down.to_vec(), e.eme_down.to_vec()),
        l("eme", a.eme.to_vec(), e.eme.to_vec()),
        l("eme_tokens", vec![tokens(a.eme)], vec![tokens(e.eme)]),
        l("oee_latent", a.oee_latent.to_vec(), e.oee_latent.to_vec()),
        l("oee_tokens", vec![tokens(a.oee)], vec![tokens(e.oee)]),
    ]
}

/// Full-scale shapes against the reference values.
pub fn paper_audit() -> Result<ShapeAudit> {
    let a = analytic(&EncoderConfig::paper(), PAPER_FRAMES, PAPER_SIZE)?;
    let reference = Analytic {
        hke: [5120, 21, 30, 30],
        reference: [20, 1, 60, 60],
        eme_down: [64, 21, 60, 60],
        eme: [5120, 21, 30, 30],
        oee_latent: [16, 21, 60, 60],
        oee: [5120, 21, 30, 30],
    };
    Ok(ShapeAudit {
        scale: Scale::Paper,
        lines: lines(&a, &reference),
    })
}

fn arr4(v: Vec<usize>) -> [usize; 4] {
    let mut out = [1; 4];
    let off = 4 - v.len().min(4);
    for (i, d) in v.into_iter().take(4).enumerate() {
        out[off + i] = d;
    }
    out
}

/// Desk-scale analytic shapes against a forward pass on random inputs.
pub fn desk_audit(cfg: &RunConfig) -> Result<ShapeAudit> {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = WorldModel::new(cfg, &mut store, &mut rng)?;
    let (l, s) = (cfg.frames, cfg.size);
    let a = analytic(&m.enc, l, s)?;

    let g = Graph::new();
    let sess = Session::inference(&g, &store);
    let hands = sess.constant(Tensor::uniform(&[3, l, s, s], 0.0, 1.0, &mut rng));
    let hke = m.hke.forward(&sess, hands)?;
    let grid = |t: &crate::embeddings::EmbeddingTokens<'_, f32>| [t.tokens.shape()[1], t.grid[0], t.grid[1], t.grid[2]];
    let reference = m.reference.forward(&sess, sess.constant(Tensor::uniform(&[3, s, s], 0.0, 1.0, &mut rng)))?;
    let rshape = reference.shape();
    let plucker = sess.constant(Tensor::randn(&[6, l, s, s], 1.0, &mut rng));
    let eme_down = m.eme.downsample(&sess, plucker)?;
    let eme = m.eme.forward(&sess, plucker)?;
    let frames = Tensor::uniform(&[l, 3, s, s], 0.0, 1.0, &mut rng);
    let latent = m.codec.encode_frames(&sess, &frames)?;
    let first = m.codec.encode_image(&sess, &Tensor::uniform(&[3, s, s], 0.0, 1.0, &mut rng))?;
    let oee = m.oee.forward(&sess, first, latent_frames(l))?;
    let executed = Analytic {
        hke: grid(&hke),
        reference: [rshape[0], 1, rshape[1], rshape[2]],
        eme_down: arr4(eme_down.shape()),
        eme: grid(&eme),
        oee_latent: arr4(latent.shape()),
        oee: grid(&oee),
    };
    Ok(ShapeAudit {
        scale: Scale::Desk,
        lines: lines(&a, &executed),
    })
}

pub fn audit(scale: Scale, cfg: &RunConfig) -> Result<ShapeAudit> {
    match scale {
        Scale::Paper => paper_audit(),
        Scale::Desk => desk_audit(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_scale_matches() {
        let a = paper_audit().unwrap();
        assert!(a.passed(), "{}", a.render());
        assert_eq!(a.get("eme_tokens").unwrap().analytic, vec![18_900]);
        assert_eq!(a.get("ref_pyramid").unwrap().analytic, vec![60, 60, 20]);
        let text = a.render();
        assert!(text.contains("(5120,21,30,30)") && text.contains("(60,60,20)") && text.contains("18900"));
        assert!(text.contains("(16,21,60,60)"));
    }

    #[test]
    fn desk_scale_matches_execution() {
        let a = desk_audit(&RunConfig::default()).unwrap();
        assert!(a.passed(), "{}", a.render());
        assert_eq!(a.render(), desk_audit(&RunConfig::default()).unwrap().render());
    }

    #[test]
    fn mismatch_is_reported() {
        let mut a = paper_audit().unwrap();
        a.lines[0].expected = vec![1];
        assert!(!a.passed());
        assert!(a.render().contains("MISMATCH"));
    }
}
