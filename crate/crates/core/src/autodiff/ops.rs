use std::rc::Rc;

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, AttnGeom, ConvGeom, GROUP_NORM_EPS};
use crate::tensor::{conv_out_extent, numel, LayerKind, LayerSpec, Real, Tensor};

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Convolution geometry resolved against a concrete input.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub geom: ConvGeom,
    pub cout: usize,
}

impl Conv {
    /// Resolve `spec` for an input of shape `[C, T, H, W]`.
    pub fn resolve(spec: &LayerSpec, input: &[usize]) -> Result<Self> {
        spec.validate()?;
        if !spec.is_conv() {
            return Err(Error::Invalid(format!("{:?} is not a convolution", spec.kind)));
        }
        if input.len() != 4 {
            return Err(Error::shape("conv", format!("expected [C,T,H,W], got {input:?}")));
        }
        if input[0] != spec.channels_in {
            return Err(Error::shape(
                "conv",
                format!("layer expects {} input channels, got {}", spec.channels_in, input[0]),
            ));
        }
        let pads = spec.pads();
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = conv_out_extent(input[a + 1], spec.kernel[a], spec.stride[a], pads[a].0 + pads[a].1)?;
        }
        Ok(Self {
            geom: ConvGeom {
                cin: input[0],
                input: [input[1], input[2], input[3]],
                kernel: spec.kernel,
                stride: spec.stride,
                pad: [pads[0].0, pads[1].0, pads[2].0],
                output,
            },
            cout: spec.channels_out,
        })
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let k = self.geom.kernel;
        [self.cout, self.geom.cin, k[0], k[1], k[2]]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        let o = self.geom.output;
        [self.cout, o[0], o[1], o[2]]
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", a.shape(), b.shape())?;
        let y = a.zip_map(&b, |x, y| x + y)?;
        Ok(self.graph.push(y, &[self.id, other.id], |g, _, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", a.shape(), b.shape())?;
        let y = a.zip_map(&b, |x, y| x - y)?;
        Ok(self.graph.push(y, &[self.id, other.id], |g, _, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        }))
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", a.shape(), b.shape())?;
        let y = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.graph.push(y, &[self.id, other.id], |g, p, _| {
            vec![
                Some(g.zip_map(&p[1], |g, b| g * b).unwrap()),
                Some(g.zip_map(&p[0], |g, a| g * a).unwrap()),
            ]
        }))
    }

    pub fn scale(self, c: f64) -> Var<'g, T> {
        let c = T::of(c);
        let y = self.value().map(|x| x * c);
        self.graph.push(y, &[self.id], move |g, _, _| vec![Some(g.map(|v| v * c))])
    }

    /// Multiply every element by the single value held in `s` (shape `[1]`).
    pub fn scale_by(self, s: Var<'g, T>) -> Result<Var<'g, T>> {
        if s.numel() != 1 {
            return Err(Error::shape("scale_by", format!("scalar expected, got {:?}", s.shape())));
        }
        let sv = s.value().item();
        let y = self.value().map(|x| x * sv);
        Ok(self.graph.push(y, &[self.id, s.id], |g, p, _| {
            let sv = p[1].item();
            let ds: T = g.data().iter().zip(p[0].data()).map(|(&g, &x)| g * x).sum();
            vec![Some(g.map(|v| v * sv)), Some(Tensor::from_vec(p[1].shape(), vec![ds]).unwrap())]
        }))
    }

    pub fn silu(self) -> Var<'g, T> {
        let y = self.value().map(|x| T::of(x.f64() * sigmoid(x.f64())));
        self.graph.push(y, &[self.id], |g, p, _| {
            let dx = g
                .zip_map(&p[0], |g, x| {
                    let s = sigmoid(x.f64());
                    g * T::of(s * (1.0 + x.f64() * (1.0 - s)))
                })
                .unwrap();
            vec![Some(dx)]
        })
    }

    pub fn sum(self) -> Var<'g, T> {
        let v = self.value();
        let s: T = v.data().iter().copied().sum();
        let shape = v.shape().to_vec();
        self.graph.push(Tensor::scalar(s), &[self.id], move |g, _, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// `mean((self - other)^2)`.
    pub fn mse(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let d = self.sub(other)?;
        Ok(d.mul(d)?.mean())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value();
        let old = v.shape().to_vec();
        let y = (*v).clone().reshape(shape)?;
        Ok(self.graph.push(y, &[self.id], move |g, _, _| {
            vec![Some(g.clone().reshape(&old).unwrap())]
        }))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'g, T>> {
        let y = self.value().permute(perm)?;
        let inv = kernels::inverse_permutation(perm);
        Ok(self.graph.push(y, &[self.id], move |g, _, _| vec![Some(kernels::permute(g, &inv))]))
    }

    /// Swap the two axes of a matrix.
    pub fn transpose(self) -> Result<Var<'g, T>> {
        if self.shape().len() != 2 {
            return Err(Error::shape("transpose", format!("matrix expected, got {:?}", self.shape())));
        }
        self.permute(&[1, 0])
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            y.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        Ok(self.graph.push(Tensor::raw(out_shape, y), &[self.id], move |g, _, _| {
            let mut dx = vec![T::zero(); outer * ext * inner];
            for o in 0..outer {
                let base = (o * ext + start) * inner;
                dx[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::raw(shape.clone(), dx))]
        }))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let graph = first.graph;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut exts = Vec::with_capacity(parts.len());
        for v in &values {
            let s = v.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            exts.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = exts.iter().sum();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in values.iter().zip(&exts) {
                y.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(graph.push(Tensor::raw(out_shape, y), &ids, move |g, p, _| {
            let mut grads: Vec<Vec<T>> = exts.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gi, &e) in grads.iter_mut().zip(&exts) {
                    gi.extend_from_slice(&g.data()[off..off + e * inner]);
                    off += e * inner;
                }
            }
            grads
                .into_iter()
                .zip(p)
                .map(|(d, pv)| Some(Tensor::raw(pv.shape().to_vec(), d)))
                .collect()
        }))
    }

    /// `x[.., d] + v[d]` broadcast over leading axes.
    pub fn add_row(self, v: Var<'g, T>) -> Result<Var<'g, T>> {
        let (x, r) = (self.value(), v.value());
        let d = *x.shape().last().unwrap();
        if r.len() != d {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", x.shape(), r.shape())));
        }
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(d) {
            for (a, &b) in row.iter_mut().zip(r.data()) {
                *a += b;
            }
        }
        Ok(self.graph.push(y, &[self.id, v.id], move |g, p, _| {
            let mut dv = vec![T::zero(); d];
            for row in g.data().chunks(d) {
                for (a, &b) in dv.iter_mut().zip(row) {
                    *a += b;
                }
            }
            vec![Some(g.clone()), Some(Tensor::raw(p[1].shape().to_vec(), dv))]
        }))
    }

    /// `x[.., d] * v[d]` broadcast over leading axes.
    pub fn mul_row(self, v: Var<'g, T>) -> Result<Var<'g, T>> {
        let (x, r) = (self.value(), v.value());
        let d = *x.shape().last().unwrap();
        if r.len() != d {
            return Err(Error::shape("mul_row", format!("{:?} * {:?}", x.shape(), r.shape())));
        }
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(d) {
            for (a, &b) in row.iter_mut().zip(r.data()) {
                *a *= b;
            }
        }
        Ok(self.graph.push(y, &[self.id, v.id], move |g, p, _| {
            let mut dx = g.clone();
            for row in dx.data_mut().chunks_mut(d) {
                for (a, &b) in row.iter_mut().zip(p[1].data()) {
                    *a *= b;
                }
            }
            let mut dv = vec![T::zero(); d];
            for (grow, xrow) in g.data().chunks(d).zip(p[0].data().chunks(d)) {
                for ((a, &gg), &xx) in dv.iter_mut().zip(grow).zip(xrow) {
                    *a += gg * xx;
                }
            }
            vec![Some(dx), Some(Tensor::raw(p[1].shape().to_vec(), dv))]
        }))
    }

    /// Mean over the trailing axis: `[.., n] -> [..]` (rank-1 input gives `[1]`).
    pub fn mean_last(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = *shape.last().unwrap();
        let out_shape = if shape.len() == 1 { vec![1] } else { shape[..shape.len() - 1].to_vec() };
        let inv = T::of(1.0 / n as f64);
        let y: Vec<T> = x.data().chunks(n).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        self.graph.push(Tensor::raw(out_shape, y), &[self.id], move |g, _, _| {
            let mut dx = Vec::with_capacity(numel(&shape));
            for &gv in g.data() {
                dx.extend(std::iter::repeat_n(gv * inv, n));
            }
            vec![Some(Tensor::raw(shape.clone(), dx))]
        })
    }

    /// Affine map over the trailing axis: `x[.., din] · Wᵀ + b` with `W[dout, din]`.
    pub fn linear(self, w: Var<'g, T>, b: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let (x, wv) = (self.value(), w.value());
        let ws = wv.shape();
        let xs = x.shape().to_vec();
        let din = *xs.last().unwrap();
        if ws.len() != 2 || ws[1] != din {
            return Err(Error::shape("linear", format!("input {xs:?} vs weight {ws:?}")));
        }
        let dout = ws[0];
        let rows = x.len() / din;
        let mut y = kernels::gemm_nt(x.data(), wv.data(), rows, din, dout);
        let mut ids = vec![self.id, w.id];
        if let Some(b) = b {
            let bv = b.value();
            if bv.len() != dout {
                return Err(Error::shape("linear", format!("bias {:?} vs {dout} outputs", bv.shape())));
            }
            for row in y.chunks_mut(dout) {
                for (a, &c) in row.iter_mut().zip(bv.data()) {
                    *a += c;
                }
            }
            ids.push(b.id);
        }
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = dout;
        let has_bias = b.is_some();
        Ok(self.graph.push(Tensor::raw(out_shape, y), &ids, move |g, p, _| {
            let dx = kernels::gemm_nn(g.data(), p[1].data(), rows, dout, din);
            let dw = kernels::gemm_tn(g.data(), p[0].data(), dout, rows, din);
            let mut out = vec![
                Some(Tensor::raw(xs.clone(), dx)),
                Some(Tensor::raw(p[1].shape().to_vec(), dw)),
            ];
            if has_bias {
                let mut db = vec![T::zero(); dout];
                for row in g.data().chunks(dout) {
                    for (a, &c) in db.iter_mut().zip(row) {
                        *a += c;
                    }
                }
                out.push(Some(Tensor::raw(p[2].shape().to_vec(), db)));
            }
            out
        }))
    }

    /// Convolution over `[C, T, H, W]` with weight `[Cout, Cin, kt, kh, kw]`.
    pub fn conv(self, spec: &LayerSpec, w: Var<'g, T>, b: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let x = self.value();
        let conv = Conv::resolve(spec, x.shape())?;
        let wv = w.value();
        if wv.shape() != conv.weight_shape() {
            return Err(Error::shape(
                "conv",
                format!("weight {:?}, layer needs {:?}", wv.shape(), conv.weight_shape()),
            ));
        }
        let bv = b.map(|b| b.value());
        if let Some(bv) = &bv {
            if bv.len() != conv.cout {
                return Err(Error::shape("conv", format!("bias {:?} vs {} channels", bv.shape(), conv.cout)));
            }
        }
        let y = kernels::conv_forward(x.data(), wv.data(), bv.as_ref().map(|b| b.data()), conv.cout, &conv.geom);
        let mut ids = vec![self.id, w.id];
        if let Some(b) = b {
            ids.push(b.id);
        }
        let has_bias = b.is_some();
        Ok(self.graph.push(Tensor::raw(conv.output_shape().to_vec(), y), &ids, move |g, p, _| {
            let (dx, dw, db) = kernels::conv_backward(p[0].data(), p[1].data(), g.data(), conv.cout, &conv.geom);
            let mut out = vec![
                Some(Tensor::raw(p[0].shape().to_vec(), dx)),
                Some(Tensor::raw(p[1].shape().to_vec(), dw)),
            ];
            if has_bias {
                out.push(Some(Tensor::raw(p[2].shape().to_vec(), db)));
            }
            out
        }))
    }

    /// 2D convolution over `[C, H, W]`; the layer must be a 2D layer.
    pub fn conv2d(self, spec: &LayerSpec, w: Var<'g, T>, b: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let s = self.shape();
        if s.len() != 3 || spec.kind != LayerKind::Conv2d {
            return Err(Error::shape("conv2d", format!("[C,H,W] input with a Conv2d layer expected, got {s:?}")));
        }
        let y = self.reshape(&[s[0], 1, s[1], s[2]])?.conv(spec, w, b)?;
        let o = y.shape();
        y.reshape(&[o[0], o[2], o[3]])
    }

    /// Group normalization over a channel-first tensor `[C, ...]`.
    pub fn group_norm(self, groups: usize, scale: Option<Var<'g, T>>, shift: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let x = self.value();
        let c = x.shape()[0];
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape("group_norm", format!("{c} channels not divisible into {groups} groups")));
        }
        let sv = scale.map(|s| s.value());
        let bv = shift.map(|s| s.value());
        for v in sv.iter().chain(bv.iter()) {
            if v.len() != c {
                return Err(Error::shape("group_norm", format!("affine {:?} vs {c} channels", v.shape())));
            }
        }
        let y = kernels::group_norm_forward(
            x.data(),
            c,
            groups,
            sv.as_ref().map(|s| s.data()),
            bv.as_ref().map(|s| s.data()),
            GROUP_NORM_EPS,
        );
        let mut ids = vec![self.id];
        let scale_slot = scale.map(|s| {
            ids.push(s.id);
            ids.len() - 1
        });
        let shift_slot = shift.map(|s| {
            ids.push(s.id);
            ids.len() - 1
        });
        Ok(self.graph.push(Tensor::raw(x.shape().to_vec(), y), &ids, move |g, p, _| {
            let scale = scale_slot.map(|i| p[i].data());
            let (dx, ds, db) = kernels::group_norm_backward(p[0].data(), g.data(), c, groups, scale, GROUP_NORM_EPS);
            let mut out = vec![Some(Tensor::raw(p[0].shape().to_vec(), dx))];
            if let Some(i) = scale_slot {
                out.push(Some(Tensor::raw(p[i].shape().to_vec(), ds)));
            }
            if let Some(i) = shift_slot {
                out.push(Some(Tensor::raw(p[i].shape().to_vec(), db.clone())));
            }
            out
        }))
    }

    /// Normalize every token of `[N, d]` over its width (no affine).
    pub fn layer_norm(self) -> Result<Var<'g, T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape("layer_norm", format!("[N, d] expected, got {s:?}")));
        }
        self.group_norm(s[0], None, None)
    }

    /// Multi-head attention over batched sequences `q[B, Nq, D]`, `k[B, Nk, D]`,
    /// `v[B, Nk, Dv]`. Rank-2 inputs are treated as a batch of one.
    pub fn attention(self, k: Var<'g, T>, v: Var<'g, T>, heads: usize) -> Result<Var<'g, T>> {
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        let lift = |s: &[usize]| -> Vec<usize> {
            if s.len() == 2 { vec![1, s[0], s[1]] } else { s.to_vec() }
        };
        let (qs, ks, vs) = (lift(qv.shape()), lift(kv.shape()), lift(vv.shape()));
        if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
            return Err(Error::shape("attention", "rank 2 or 3 inputs expected"));
        }
        if qs[2] != ks[2] {
            return Err(Error::shape("attention", format!("query width {} vs key width {}", qs[2], ks[2])));
        }
        if qs[0] != ks[0] || ks[0] != vs[0] || ks[1] != vs[1] {
            return Err(Error::shape("attention", format!("q {qs:?} k {ks:?} v {vs:?}")));
        }
        if heads == 0 || qs[2] % heads != 0 || vs[2] % heads != 0 {
            return Err(Error::shape("attention", format!("width {} not divisible into {heads} heads", qs[2])));
        }
        let geom = AttnGeom {
            batch: qs[0],
            nq: qs[1],
            nk: ks[1],
            dim: qs[2],
            dim_v: vs[2],
            heads,
        };
        let (out, probs) = kernels::attention_forward(qv.data(), kv.data(), vv.data(), &geom);
        let mut out_shape = qv.shape().to_vec();
        *out_shape.last_mut().unwrap() = geom.dim_v;
        Ok(self.graph.push(Tensor::raw(out_shape, out), &[self.id, k.id, v.id], move |g, p, _| {
            let (dq, dk, dv) = kernels::attention_backward(p[0].data(), p[1].data(), p[2].data(), &probs, g.data(), &geom);
            vec![
                Some(Tensor::raw(p[0].shape().to_vec(), dq)),
                Some(Tensor::raw(p[1].shape().to_vec(), dk)),
                Some(Tensor::raw(p[2].shape().to_vec(), dv)),
            ]
        }))
    }

    /// Rotary encoding of `[N, D]` tokens at 3D grid positions `(t, h, w) + shift`.
    pub fn rope(self, positions: &[[i64; 3]], shift: [i64; 3], heads: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 2 || s[0] != positions.len() {
            return Err(Error::shape("rope", format!("{s:?} tokens vs {} positions", positions.len())));
        }
        let dim = s[1];
        if heads == 0 || dim % heads != 0 || (dim / heads) % 2 != 0 {
            return Err(Error::shape("rope", format!("head width {dim}/{heads} must be even")));
        }
        let pos: Vec<[f64; 3]> = positions
            .iter()
            .map(|p| [(p[0] + shift[0]) as f64, (p[1] + shift[1]) as f64, (p[2] + shift[2]) as f64])
            .collect();
        let y = kernels::rope_rotate(x.data(), &pos, dim, heads, 1.0);
        let shape = s.to_vec();
        Ok(self.graph.push(Tensor::raw(shape.clone(), y), &[self.id], move |g, _, _| {
            vec![Some(Tensor::raw(shape.clone(), kernels::rope_rotate(g.data(), &pos, dim, heads, -1.0)))]
        }))
    }
}
