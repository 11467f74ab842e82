//! DiT denoiser: adaLN-Zero blocks over patchified latent tokens, with
//! gated hand fusion, zero-initialised ego-motion adapters, key/value-only
//! object tokens and cross-attention to a global image context.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Session, Var};
use crate::error::{Error, Result};
use crate::nn::{grid_positions, volume_to_tokens, ConvLayer, Linear};
use crate::tensor::{LayerSpec, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DitConfig {
    pub blocks: usize,
    /// Leading blocks that receive an adapter (D).
    pub adapter_depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub context_tokens: usize,
    pub gate_init: f64,
    pub guidance: f64,
    pub latent_channels: usize,
    /// Channels of the first-frame anchor concatenated to the noisy latent.
    pub anchor_channels: usize,
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.adapter_depth == 0 || self.adapter_depth > self.blocks {
            return Err(Error::Config(format!(
                "adapter depth {} must lie in 1..={}",
                self.adapter_depth, self.blocks
            )));
        }
        if self.width % self.heads != 0 || (self.width / self.heads) % 2 != 0 {
            return Err(Error::Config(format!("width {} vs {} heads", self.width, self.heads)));
        }
        Ok(())
    }
}

/// `X_0 = T_main + γ_h · T_HKE`.
pub fn fuse_hand_tokens<'g, T: Real>(main: Var<'g, T>, hke: Var<'g, T>, gamma: Var<'g, T>) -> Result<Var<'g, T>> {
    if main.shape() != hke.shape() {
        return Err(Error::shape("fuse_hand_tokens", format!("{:?} vs {:?}", main.shape(), hke.shape())));
    }
    main.add(hke.scale_by(gamma)?)
}

/// `T_all = [X_0; T_OEE]` along the token axis.
pub fn extend_sequence<'g, T: Real>(x0: Var<'g, T>, oee: Var<'g, T>) -> Result<Var<'g, T>> {
    let (a, b) = (x0.shape(), oee.shape());
    if a.len() != 2 || b.len() != 2 || a[1] != b[1] {
        return Err(Error::shape("extend_sequence", format!("{a:?} vs {b:?}")));
    }
    Var::concat(&[x0, oee], 0)
}

/// `ΔX_l = U_l(pad(T_EME))` for `l < D`, `None` otherwise. `T_EME` is
/// zero-padded at the end to `len` rows.
pub fn adapter_residual<'g, T: Real>(
    s: &Session<'g, '_, T>,
    adapters: &[Linear],
    eme: Var<'g, T>,
    l: usize,
    len: usize,
) -> Result<Option<Var<'g, T>>> {
    let Some(u) = adapters.get(l) else { return Ok(None) };
    let es = eme.shape();
    if es.len() != 2 || es[0] > len {
        return Err(Error::shape("adapter_residual", format!("{es:?} into {len} tokens")));
    }
    let padded = if es[0] < len {
        Var::concat(&[eme, s.constant(Tensor::zeros(&[len - es[0], es[1]]))], 0)?
    } else {
        eme
    };
    Ok(Some(u.forward(s, padded)?))
}

/// Sinusoidal embedding of a (possibly fractional) timestep.
pub fn timestep_features<T: Real>(t: f64, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut v = vec![T::zero(); dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        v[i] = T::of((t * f).sin());
        v[half + i] = T::of((t * f).cos());
    }
    Tensor::raw(vec![dim], v)
}

/// Learned global descriptor of the first frame used as cross-attention
/// keys and values.
#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub convs: Vec<ConvLayer>,
    pub proj: Linear,
    pub tokens: usize,
    pub width: usize,
}

impl ContextEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, tokens: usize, width: usize, rng: &mut R) -> Self {
        let specs = [
            LayerSpec::conv2d(3, 16, 3, 2, 1),
            LayerSpec::conv2d(16, 32, 3, 2, 1),
            LayerSpec::conv2d(32, 32, 3, 2, 1),
        ];
        let convs = specs
            .iter()
            .enumerate()
            .map(|(i, sp)| ConvLayer::new(store, &format!("ctx.conv.{i}"), *sp, rng))
            .collect();
        Self {
            convs,
            proj: Linear::new(store, "ctx.proj", 32, tokens * width, true, rng),
            tokens,
            width,
        }
    }

    /// `image[3, S, S]` to `[tokens, width]`.
    pub fn forward<'g, T: Real>(&self, s: &Session<'g, '_, T>, image: Var<'g, T>) -> Result<Var<'g, T>> {
        let mut x = image;
        for c in &self.convs {
            x = c.forward(s, x)?.silu();
        }
        let sh = x.shape();
        let pooled = x.reshape(&[sh[0], sh[1] * sh[2]])?.mean_last().reshape(&[1, sh[0]])?;
        self.proj.forward(s, pooled)?.reshape(&[self.tokens, self.width])
    }
}

#[derive(Clone, Debug)]
pub struct DitBlock {
    /// adaLN-Zero modulation: shift, scale, gate for attention and MLP.
    pub modulation: Linear,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub cq: Linear,
    pub ck: Linear,
    pub cv: Linear,
    pub co: Linear,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

/// Token layout shared by every block of one forward pass.
pub struct BlockInputs<'a, 'g, T: Real> {
    pub main_len: usize,
    /// RoPE positions of every row of the extended sequence, shift applied.
    pub positions: &'a [[i64; 3]],
    /// `silu(t_emb)`, `[1, d]`.
    pub temb: Var<'g, T>,
    pub context: Option<Var<'g, T>>,
}

fn one_plus<'g, T: Real>(s: &Session<'g, '_, T>, v: Var<'g, T>) -> Result<Var<'g, T>> {
    v.add(s.constant(Tensor::ones(&v.shape())))
}

impl DitBlock {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cfg: &DitConfig, rng: &mut R) -> Self {
        let d = cfg.width;
        let mut lin = |n: &str, din: usize, dout: usize, rng: &mut R| {
            Linear::new(store, &format!("{name}.{n}"), din, dout, true, rng)
        };
        let q = lin("q", d, d, rng);
        let k = lin("k", d, d, rng);
        let v = lin("v", d, d, rng);
        let o = lin("o", d, d, rng);
        let cq = lin("cq", d, d, rng);
        let ck = lin("ck", d, d, rng);
        let cv = lin("cv", d, d, rng);
        let co = lin("co", d, d, rng);
        let mlp_in = lin("mlp_in", d, cfg.mlp_ratio * d, rng);
        let mlp_out = lin("mlp_out", cfg.mlp_ratio * d, d, rng);
        let modulation = Linear::zeros(store, &format!("{name}.mod"), d, 6 * d);
        Self {
            modulation,
            q,
            k,
            v,
            o,
            cq,
            ck,
            cv,
            co,
            mlp_in,
            mlp_out,
        }
    }

    /// One block over the extended sequence `[M, d]`; rows past `main_len`
    /// (object tokens) are only read as keys and values and pass through.
    pub fn forward<'g, T: Real>(
        &self,
        s: &Session<'g, '_, T>,
        x_all: Var<'g, T>,
        inp: &BlockInputs<'_, 'g, T>,
        heads: usize,
    ) -> Result<Var<'g, T>> {
        let sh = x_all.shape();
        let (m, d) = (sh[0], sh[1]);
        let n = inp.main_len;
        let mods = self.modulation.forward(s, inp.temb)?.reshape(&[6 * d])?;
        let part = |i: usize| mods.slice(0, i * d, d);
        let (shift1, scale1, gate1) = (part(0)?, one_plus(s, part(1)?)?, part(2)?);
        let (shift2, scale2, gate2) = (part(3)?, one_plus(s, part(4)?)?, part(5)?);

        let h_all = x_all.layer_norm()?.mul_row(scale1)?.add_row(shift1)?;
        let h_main = if m > n { h_all.slice(0, 0, n)? } else { h_all };
        let q = self.q.forward(s, h_main)?.rope(&inp.positions[..n], [0; 3], heads)?;
        let k = self.k.forward(s, h_all)?.rope(inp.positions, [0; 3], heads)?;
        let v = self.v.forward(s, h_all)?;
        let a = self.o.forward(s, q.attention(k, v, heads)?)?;
        let mut x = if m > n { x_all.slice(0, 0, n)? } else { x_all };
        x = x.add(a.mul_row(gate1)?)?;

        if let Some(ctx) = inp.context {
            let cq = self.cq.forward(s, x.layer_norm()?)?;
            let ck = self.ck.forward(s, ctx)?;
            let cv = self.cv.forward(s, ctx)?;
            x = x.add(self.co.forward(s, cq.attention(ck, cv, heads)?)?)?;
        }

        let h2 = x.layer_norm()?.mul_row(scale2)?.add_row(shift2)?;
        let mlp = self.mlp_out.forward(s, self.mlp_in.forward(s, h2)?.silu())?;
        x = x.add(mlp.mul_row(gate2)?)?;

        if m > n {
            Var::concat(&[x, x_all.slice(0, n, m - n)?], 0)
        } else {
            Ok(x)
        }
    }
}

/// Conditioning streams for one denoiser call. Missing streams are skipped.
#[derive(Clone, Copy, Debug)]
pub struct DitConditioning<'g, T: Real> {
    /// `[C_ref, T_lat, h, w]`.
    pub anchor: Var<'g, T>,
    pub hke: Option<Var<'g, T>>,
    pub eme: Option<Var<'g, T>>,
    pub oee: Option<Var<'g, T>>,
    pub oee_shift: [i64; 3],
    /// `[context_tokens, d]`.
    pub context: Option<Var<'g, T>>,
}

#[derive(Clone, Debug)]
pub struct Dit {
    pub cfg: DitConfig,
    pub patchify: ConvLayer,
    pub gate: ParamId,
    pub adapters: Vec<Linear>,
    pub t_in: Linear,
    pub t_out: Linear,
    pub blocks: Vec<DitBlock>,
    pub final_mod: Linear,
    pub head: Linear,
}

impl Dit {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: DitConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let cin = cfg.latent_channels + cfg.anchor_channels;
        let patchify = ConvLayer::new(store, "dit.patchify", LayerSpec::patchify3d(cin, d, [1, 2, 2]), rng);
        let gate = store.add("dit.gate_h", Tensor::from_f64(&[1], &[cfg.gate_init])?);
        let adapters = (0..cfg.adapter_depth)
            .map(|l| Linear::zeros(store, &format!("dit.adapter.{l}"), d, d))
            .collect();
        let t_in = Linear::new(store, "dit.t_in", d, d, true, rng);
        let t_out = Linear::new(store, "dit.t_out", d, d, true, rng);
        let blocks = (0..cfg.blocks)
            .map(|l| DitBlock::new(store, &format!("dit.block.{l}"), &cfg, rng))
            .collect();
        let final_mod = Linear::zeros(store, "dit.final_mod", d, 2 * d);
        let head = Linear::zeros(store, "dit.head", d, 4 * cfg.latent_channels);
        Ok(Self {
            cfg,
            patchify,
            gate,
            adapters,
            t_in,
            t_out,
            blocks,
            final_mod,
            head,
        })
    }

    /// `silu(MLP(sinusoid(t)))`, `[1, d]`.
    fn time_embedding<'g, T: Real>(&self, s: &Session<'g, '_, T>, t: f64) -> Result<Var<'g, T>> {
        let d = self.cfg.width;
        let f = s.constant(timestep_features::<T>(t, d).reshape(&[1, d])?);
        let h = self.t_in.forward(s, f)?.silu();
        Ok(self.t_out.forward(s, h)?.silu())
    }

    /// Predicted noise for `z_t[c_lat, T_lat, h, w]` at timestep `t`.
    pub fn forward<'g, T: Real>(
        &self,
        s: &Session<'g, '_, T>,
        z_t: Var<'g, T>,
        t: usize,
        cond: &DitConditioning<'g, T>,
    ) -> Result<Var<'g, T>> {
        let zs = z_t.shape();
        if zs.len() != 4 || zs[0] != self.cfg.latent_channels || zs[2] % 2 != 0 || zs[3] % 2 != 0 {
            return Err(Error::shape("dit", format!("latent {zs:?}")));
        }
        if cond.anchor.shape()[1..] != zs[1..] {
            return Err(Error::shape("dit", format!("anchor {:?} vs latent {zs:?}", cond.anchor.shape())));
        }
        let x = Var::concat(&[z_t, cond.anchor], 0)?;
        let x = self.patchify.forward(s, x)?;
        let xs = x.shape();
        let grid = [xs[1], xs[2], xs[3]];
        let main = volume_to_tokens(x)?;
        let n = main.shape()[0];
        let d = self.cfg.width;

        let mut x0 = match cond.hke {
            Some(h) => fuse_hand_tokens(main, h, s.p(self.gate))?,
            None => main,
        };
        let mut positions = grid_positions(grid);
        if let Some(o) = cond.oee {
            let os = o.shape();
            if os[1] != d {
                return Err(Error::shape("dit", format!("object tokens {os:?} vs width {d}")));
            }
            let ogrid = if os[0] == n { grid } else { [1, 1, os[0]] };
            positions.extend(grid_positions(ogrid).into_iter().map(|p| {
                [p[0] + cond.oee_shift[0], p[1] + cond.oee_shift[1], p[2] + cond.oee_shift[2]]
            }));
            x0 = extend_sequence(x0, o)?;
        }
        let len = positions.len();
        let temb = self.time_embedding(s, t as f64)?;
        let inp = BlockInputs {
            main_len: n,
            positions: &positions,
            temb,
            context: cond.context,
        };
        let mut x_all = x0;
        for (l, block) in self.blocks.iter().enumerate() {
            if let Some(eme) = cond.eme {
                if let Some(dx) = adapter_residual(s, &self.adapters, eme, l, len)? {
                    x_all = x_all.add(dx)?;
                }
            }
            x_all = block.forward(s, x_all, &inp, self.cfg.heads)?;
        }
        let x = if len > n { x_all.slice(0, 0, n)? } else { x_all };
        let fm = self.final_mod.forward(s, temb)?.reshape(&[2 * d])?;
        let (shift, scale) = (fm.slice(0, 0, d)?, one_plus(s, fm.slice(0, d, d)?)?);
        let h = x.layer_norm()?.mul_row(scale)?.add_row(shift)?;
        let out = self.head.forward(s, h)?;
        unpatchify(out, grid, self.cfg.latent_channels)
    }
}

/// `[N, c·4]` tokens with per-token layout `(c, 1, 2, 2)` back to `[c, T, 2H, 2W]`.
pub fn unpatchify<'g, T: Real>(tokens: Var<'g, T>, grid: [usize; 3], c: usize) -> Result<Var<'g, T>> {
    let [t, h, w] = grid;
    tokens
        .reshape(&[t, h, w, c, 2, 2])?
        .permute(&[3, 0, 1, 4, 2, 5])?
        .reshape(&[c, t, 2 * h, 2 * w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unpatchify_inverts_patch_gather() {
        // A patchify conv with identity weights gathers (c, 1, 2, 2) patches.
        let (c, grid) = (3, [2, 2, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = Tensor::<f64>::randn(&[c, 2, 4, 6], 1.0, &mut rng);
        let spec = LayerSpec::patchify3d(c, 4 * c, [1, 2, 2]);
        let mut w = Tensor::zeros(&[4 * c, c, 1, 2, 2]);
        for o in 0..4 * c {
            w.set(&[o, o / 4, 0, (o % 4) / 2, o % 2], 1.0);
        }
        let g = Graph::new();
        let x = g.constant(z.clone());
        let tok = volume_to_tokens(x.conv(&spec, g.constant(w), None).unwrap()).unwrap();
        let back = unpatchify(tok, grid, c).unwrap().value();
        assert!(back.bit_eq(&z));
    }

    #[test]
    fn fusion_and_extension() {
        let g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let main = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let hke = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let m = g.constant(main.clone());
        let h = g.constant(hke.clone());
        let zero = fuse_hand_tokens(m, h, g.constant(Tensor::scalar(0.0))).unwrap().value();
        assert!(zero.bit_eq(&main));
        let half = fuse_hand_tokens(m, h, g.constant(Tensor::scalar(0.5))).unwrap().value();
        for i in 0..24 {
            assert_eq!(half.data()[i], main.data()[i] + 0.5 * hke.data()[i]);
        }
        assert!(fuse_hand_tokens(m, g.constant(Tensor::zeros(&[5, 4])), g.constant(Tensor::scalar(1.0))).is_err());
        let ext = extend_sequence(m, g.constant(Tensor::zeros(&[3, 4]))).unwrap();
        assert_eq!(ext.shape(), vec![9, 4]);
        assert!(extend_sequence(m, g.constant(Tensor::zeros(&[3, 5]))).is_err());
    }

    #[test]
    fn adapters_start_at_zero_and_skip_deep_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let adapters: Vec<Linear> = (0..2).map(|l| Linear::zeros(&mut store, &format!("a{l}"), 4, 4)).collect();
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let eme = s.constant(Tensor::randn(&[6, 4], 1.0, &mut rng));
        let dx = adapter_residual(&s, &adapters, eme, 1, 9).unwrap().unwrap().value();
        assert_eq!(dx.shape(), &[9, 4]);
        assert!(dx.data().iter().all(|v| *v == 0.0));
        assert!(adapter_residual(&s, &adapters, eme, 2, 9).unwrap().is_none());
    }
}
