//! Raw slice kernels. Everything here is shape-trusting; callers in
//! [`crate::autodiff`] validate extents before dispatching.

use super::{numel, Real, Tensor};
use crate::par;

const COL_BLOCK: usize = 128;

/// `C[m,n] = sum_p A(i,p) B[p,n]` where `A(i,p) = a[i*rs + p*cs]`.
///
/// Work is split over column tiles so each tile of `B` is streamed once; every
/// output element is accumulated in ascending `p`, independent of threading.
fn gemm_strided<T: Real>(a: &[T], rs: usize, cs: usize, b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let blocks = n.div_ceil(COL_BLOCK);
    let tiles = par::map_range(blocks, |blk| {
        let j0 = blk * COL_BLOCK;
        let w = COL_BLOCK.min(n - j0);
        let mut tile = vec![T::zero(); m * w];
        for p in 0..k {
            let brow = &b[p * n + j0..p * n + j0 + w];
            for i in 0..m {
                let aip = a[i * rs + p * cs];
                let crow = &mut tile[i * w..(i + 1) * w];
                for (c, &bv) in crow.iter_mut().zip(brow) {
                    *c += aip * bv;
                }
            }
        }
        tile
    });
    let mut c = vec![T::zero(); m * n];
    for (blk, tile) in tiles.into_iter().enumerate() {
        let j0 = blk * COL_BLOCK;
        let w = COL_BLOCK.min(n - j0);
        for i in 0..m {
            c[i * n + j0..i * n + j0 + w].copy_from_slice(&tile[i * w..(i + 1) * w]);
        }
    }
    c
}

/// `A[m,k] · B[k,n]`.
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    gemm_strided(a, k, 1, b, m, k, n)
}

/// `A[k,m]ᵀ · B[k,n]`.
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    gemm_strided(a, 1, m, b, m, k, n)
}

#[inline]
pub fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = x.len() / 8;
    for c in 0..chunks {
        let xs = &x[c * 8..c * 8 + 8];
        let ys = &y[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..x.len() {
        tail += x[i] * y[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `A[m,k] · B[n,k]ᵀ`.
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![T::zero(); m * n];
    par::for_each_chunk(&mut c, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, out) in row.iter_mut().enumerate() {
            *out = dot(arow, &b[j * k..(j + 1) * k]);
        }
    });
    c
}

/// Geometry of a 3D convolution over `[C, T, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    /// Padding before each axis.
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.cin * numel(&self.kernel)
    }

    pub fn positions(&self) -> usize {
        numel(&self.output)
    }
}

/// Unfold `[C, T, H, W]` into `[C·kt·kh·kw, T'·H'·W']`.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let [ti, hi, wi] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let [to, ho, wo] = g.output;
    let p = g.positions();
    let mut col = vec![T::zero(); g.patch_len() * p];
    par::for_each_chunk(&mut col, p, |r, row| {
        let d = r % kw;
        let b = (r / kw) % kh;
        let a = (r / (kw * kh)) % kt;
        let c = r / (kw * kh * kt);
        let xc = &x[c * ti * hi * wi..(c + 1) * ti * hi * wi];
        for ot in 0..to {
            let it = (ot * st + a) as isize - pt as isize;
            if it < 0 || it >= ti as isize {
                continue;
            }
            for oh in 0..ho {
                let ih = (oh * sh + b) as isize - ph as isize;
                if ih < 0 || ih >= hi as isize {
                    continue;
                }
                let src = &xc[(it as usize * hi + ih as usize) * wi..];
                let dst = &mut row[(ot * ho + oh) * wo..(ot * ho + oh + 1) * wo];
                for (ow, out) in dst.iter_mut().enumerate() {
                    let iw = (ow * sw + d) as isize - pw as isize;
                    if iw >= 0 && iw < wi as isize {
                        *out = src[iw as usize];
                    }
                }
            }
        }
    });
    col
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the input grid.
pub fn col2im<T: Real>(col: &[T], g: &ConvGeom) -> Vec<T> {
    let [ti, hi, wi] = g.input;
    let [_, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let [to, ho, wo] = g.output;
    let p = g.positions();
    let kk = numel(&g.kernel);
    let mut x = vec![T::zero(); g.cin * ti * hi * wi];
    par::for_each_chunk(&mut x, ti * hi * wi, |c, xc| {
        for local in 0..kk {
            let d = local % kw;
            let b = (local / kw) % kh;
            let a = local / (kw * kh);
            let row = &col[(c * kk + local) * p..(c * kk + local + 1) * p];
            for ot in 0..to {
                let it = (ot * st + a) as isize - pt as isize;
                if it < 0 || it >= ti as isize {
                    continue;
                }
                for oh in 0..ho {
                    let ih = (oh * sh + b) as isize - ph as isize;
                    if ih < 0 || ih >= hi as isize {
                        continue;
                    }
                    let base = (it as usize * hi + ih as usize) * wi;
                    let src = &row[(ot * ho + oh) * wo..(ot * ho + oh + 1) * wo];
                    for (ow, &v) in src.iter().enumerate() {
                        let iw = (ow * sw + d) as isize - pw as isize;
                        if iw >= 0 && iw < wi as isize {
                            xc[base + iw as usize] += v;
                        }
                    }
                }
            }
        }
    });
    x
}

/// `y[Cout, P] = W[Cout, K] · col[K, P] + b`.
pub fn conv_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, cout: usize, g: &ConvGeom) -> Vec<T> {
    let col = im2col(x, g);
    let p = g.positions();
    let mut y = gemm_nn(w, &col, cout, g.patch_len(), p);
    if let Some(bias) = bias {
        par::for_each_chunk(&mut y, p, |o, row| {
            let b = bias[o];
            row.iter_mut().for_each(|v| *v += b);
        });
    }
    y
}

/// Returns `(dx, dw, db)`.
pub fn conv_backward<T: Real>(x: &[T], w: &[T], dy: &[T], cout: usize, g: &ConvGeom) -> (Vec<T>, Vec<T>, Vec<T>) {
    let col = im2col(x, g);
    let p = g.positions();
    let k = g.patch_len();
    let dw = gemm_nt(dy, &col, cout, p, k);
    drop(col);
    let dcol = gemm_tn(w, dy, k, cout, p);
    let dx = col2im(&dcol, g);
    let db = (0..cout).map(|o| dy[o * p..(o + 1) * p].iter().copied().sum()).collect();
    (dx, dw, db)
}

pub fn permute<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let src = x.data();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::raw(out_shape, out)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Per-group `(mean, 1/sqrt(var + eps))` of `x` viewed as `[C, S]`.
pub fn group_stats<T: Real>(x: &[T], channels: usize, groups: usize, eps: f64) -> Vec<(f64, f64)> {
    let glen = x.len() / groups;
    debug_assert_eq!(x.len() % channels, 0);
    par::map_range(groups, |g| {
        let s = &x[g * glen..(g + 1) * glen];
        let mean = s.iter().map(|v| v.f64()).sum::<f64>() / glen as f64;
        let var = s.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / glen as f64;
        (mean, 1.0 / (var + eps).sqrt())
    })
}

pub fn group_norm_forward<T: Real>(
    x: &[T],
    channels: usize,
    groups: usize,
    scale: Option<&[T]>,
    shift: Option<&[T]>,
    eps: f64,
) -> Vec<T> {
    let stats = group_stats(x, channels, groups, eps);
    let clen = x.len() / channels;
    let cpg = channels / groups;
    let mut y = vec![T::zero(); x.len()];
    par::for_each_chunk(&mut y, clen, |c, yc| {
        let (mean, rstd) = stats[c / cpg];
        let (mean, rstd) = (T::of(mean), T::of(rstd));
        let g = scale.map_or(T::one(), |s| s[c]);
        let b = shift.map_or(T::zero(), |s| s[c]);
        for (out, &v) in yc.iter_mut().zip(&x[c * clen..(c + 1) * clen]) {
            *out = (v - mean) * rstd * g + b;
        }
    });
    y
}

/// Returns `(dx, dscale, dshift)` with per-channel affine gradients.
pub fn group_norm_backward<T: Real>(
    x: &[T],
    dy: &[T],
    channels: usize,
    groups: usize,
    scale: Option<&[T]>,
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let stats = group_stats(x, channels, groups, eps);
    let clen = x.len() / channels;
    let cpg = channels / groups;
    let glen = clen * cpg;
    let mut dscale = vec![T::zero(); channels];
    let mut dshift = vec![T::zero(); channels];
    for c in 0..channels {
        let (mean, rstd) = stats[c / cpg];
        let (mean, rstd) = (T::of(mean), T::of(rstd));
        let xs = &x[c * clen..(c + 1) * clen];
        let ds = &dy[c * clen..(c + 1) * clen];
        let mut a = T::zero();
        let mut b = T::zero();
        for (&v, &d) in xs.iter().zip(ds) {
            a += d * (v - mean) * rstd;
            b += d;
        }
        dscale[c] = a;
        dshift[c] = b;
    }
    let mut dx = vec![T::zero(); x.len()];
    par::for_each_chunk(&mut dx, glen, |g, dxg| {
        let (mean, rstd) = stats[g];
        let (mean, rstd) = (T::of(mean), T::of(rstd));
        let xs = &x[g * glen..(g + 1) * glen];
        let ds = &dy[g * glen..(g + 1) * glen];
        let gamma = |i: usize| scale.map_or(T::one(), |s| s[g * cpg + i / clen]);
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for i in 0..glen {
            let dxhat = ds[i] * gamma(i);
            sum_d += dxhat;
            sum_dx += dxhat * (xs[i] - mean) * rstd;
        }
        let inv = T::one() / T::of(glen as f64);
        let mean_d = sum_d * inv;
        let mean_dx = sum_dx * inv;
        for i in 0..glen {
            let xhat = (xs[i] - mean) * rstd;
            dxg[i] = rstd * (ds[i] * gamma(i) - mean_d - xhat * mean_dx);
        }
    });
    (dx, dscale, dshift)
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Copy, Debug)]
pub struct AttnGeom {
    pub batch: usize,
    pub nq: usize,
    pub nk: usize,
    pub dim: usize,
    pub dim_v: usize,
    pub heads: usize,
}

impl AttnGeom {
    fn dh(&self) -> usize {
        self.dim / self.heads
    }
    fn dhv(&self) -> usize {
        self.dim_v / self.heads
    }
}

/// Returns `(out[B, Nq, Dv], probs[B, H, Nq, Nk])`.
pub fn attention_forward<T: Real>(q: &[T], k: &[T], v: &[T], g: &AttnGeom) -> (Vec<T>, Vec<T>) {
    let (dh, dhv) = (g.dh(), g.dhv());
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let per_b = par::map_range(g.batch, |b| {
        let qb = &q[b * g.nq * g.dim..(b + 1) * g.nq * g.dim];
        let kb = &k[b * g.nk * g.dim..(b + 1) * g.nk * g.dim];
        let vb = &v[b * g.nk * g.dim_v..(b + 1) * g.nk * g.dim_v];
        let mut out = vec![T::zero(); g.nq * g.dim_v];
        let mut probs = vec![T::zero(); g.heads * g.nq * g.nk];
        for h in 0..g.heads {
            for i in 0..g.nq {
                let qi = &qb[i * g.dim + h * dh..i * g.dim + (h + 1) * dh];
                let row = &mut probs[(h * g.nq + i) * g.nk..(h * g.nq + i + 1) * g.nk];
                let mut max = T::neg_infinity();
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, &kb[j * g.dim + h * dh..j * g.dim + (h + 1) * dh]) * scale;
                    max = max.max(*s);
                }
                let mut z = T::zero();
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                for s in row.iter_mut() {
                    *s = *s / z;
                }
                let oi = &mut out[i * g.dim_v + h * dhv..i * g.dim_v + (h + 1) * dhv];
                for (j, &p) in row.iter().enumerate() {
                    let vj = &vb[j * g.dim_v + h * dhv..j * g.dim_v + (h + 1) * dhv];
                    for (o, &vv) in oi.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
        (out, probs)
    });
    let mut out = Vec::with_capacity(g.batch * g.nq * g.dim_v);
    let mut probs = Vec::with_capacity(g.batch * g.heads * g.nq * g.nk);
    for (o, p) in per_b {
        out.extend(o);
        probs.extend(p);
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
pub fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    g: &AttnGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (dh, dhv) = (g.dh(), g.dhv());
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let per_b = par::map_range(g.batch, |b| {
        let qb = &q[b * g.nq * g.dim..(b + 1) * g.nq * g.dim];
        let kb = &k[b * g.nk * g.dim..(b + 1) * g.nk * g.dim];
        let vb = &v[b * g.nk * g.dim_v..(b + 1) * g.nk * g.dim_v];
        let pb = &probs[b * g.heads * g.nq * g.nk..(b + 1) * g.heads * g.nq * g.nk];
        let db = &dout[b * g.nq * g.dim_v..(b + 1) * g.nq * g.dim_v];
        let mut dq = vec![T::zero(); g.nq * g.dim];
        let mut dk = vec![T::zero(); g.nk * g.dim];
        let mut dv = vec![T::zero(); g.nk * g.dim_v];
        let mut ds = vec![T::zero(); g.nk];
        for h in 0..g.heads {
            for i in 0..g.nq {
                let p = &pb[(h * g.nq + i) * g.nk..(h * g.nq + i + 1) * g.nk];
                let doi = &db[i * g.dim_v + h * dhv..i * g.dim_v + (h + 1) * dhv];
                let mut acc = T::zero();
                for j in 0..g.nk {
                    let vj = &vb[j * g.dim_v + h * dhv..j * g.dim_v + (h + 1) * dhv];
                    ds[j] = dot(doi, vj);
                    acc += ds[j] * p[j];
                    let dvj = &mut dv[j * g.dim_v + h * dhv..j * g.dim_v + (h + 1) * dhv];
                    for (d, &o) in dvj.iter_mut().zip(doi) {
                        *d += p[j] * o;
                    }
                }
                for j in 0..g.nk {
                    ds[j] = p[j] * (ds[j] - acc) * scale;
                }
                let qi = &qb[i * g.dim + h * dh..i * g.dim + (h + 1) * dh];
                for j in 0..g.nk {
                    let kj = &kb[j * g.dim + h * dh..j * g.dim + (h + 1) * dh];
                    let dqi = &mut dq[i * g.dim + h * dh..i * g.dim + (h + 1) * dh];
                    for (d, &kv) in dqi.iter_mut().zip(kj) {
                        *d += ds[j] * kv;
                    }
                    let dkj = &mut dk[j * g.dim + h * dh..j * g.dim + (h + 1) * dh];
                    for (d, &qv) in dkj.iter_mut().zip(qi) {
                        *d += ds[j] * qv;
                    }
                }
            }
        }
        (dq, dk, dv)
    });
    let mut dq = Vec::with_capacity(q.len());
    let mut dk = Vec::with_capacity(k.len());
    let mut dv = Vec::with_capacity(v.len());
    for (a, b, c) in per_b {
        dq.extend(a);
        dk.extend(b);
        dv.extend(c);
    }
    (dq, dk, dv)
}

pub const ROPE_BASE: f64 = 10_000.0;

/// Number of rotary pairs per head assigned to the (t, h, w) axes.
pub fn rope_axis_pairs(head_dim: usize) -> [usize; 3] {
    let pairs = head_dim / 2;
    let spatial = pairs / 3;
    [pairs - 2 * spatial, spatial, spatial]
}

/// Rotate consecutive channel pairs of every head by `sign · pos_axis · θ_i`.
pub fn rope_rotate<T: Real>(x: &[T], positions: &[[f64; 3]], dim: usize, heads: usize, sign: f64) -> Vec<T> {
    let dh = dim / heads;
    let axis_pairs = rope_axis_pairs(dh);
    // (axis, frequency) for each pair within a head
    let mut table = Vec::with_capacity(dh / 2);
    for (axis, &n) in axis_pairs.iter().enumerate() {
        for i in 0..n {
            table.push((axis, ROPE_BASE.powf(-(i as f64) / n as f64)));
        }
    }
    let mut y = x.to_vec();
    par::for_each_chunk(&mut y, dim, |tok, row| {
        let pos = positions[tok];
        for h in 0..heads {
            for (j, &(axis, freq)) in table.iter().enumerate() {
                let angle = sign * pos[axis] * freq;
                let (s, c) = angle.sin_cos();
                let (s, c) = (T::of(s), T::of(c));
                let i0 = h * dh + 2 * j;
                let (a, b) = (row[i0], row[i0 + 1]);
                row[i0] = a * c - b * s;
                row[i0 + 1] = a * s + b * c;
            }
        }
    });
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_match_naive() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (17, 9, 300), (4, 33, 129)] {
            let a = Tensor::<f64>::randn(&[m, k], 1.0, &mut rng).into_data();
            let b = Tensor::<f64>::randn(&[k, n], 1.0, &mut rng).into_data();
            let want = naive(&a, &b, m, k, n);
            let close = |got: Vec<f64>| {
                got.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12)
            };
            assert!(close(gemm_nn(&a, &b, m, k, n)));
            assert!(close(gemm_tn(&transpose(&a, m, k), &b, m, k, n)));
            assert!(close(gemm_nt(&a, &transpose(&b, k, n), m, k, n)));
        }
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::<f64>::from_vec(&[2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let p = permute(&x, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[3, 1, 2]), x.at(&[1, 2, 3]));
        let back = permute(&p, &inverse_permutation(&[2, 0, 1]));
        assert_eq!(back, x);
    }

    #[test]
    fn rope_pairs_split() {
        assert_eq!(rope_axis_pairs(16), [4, 2, 2]);
        assert_eq!(rope_axis_pairs(64), [12, 10, 10]);
    }
}
