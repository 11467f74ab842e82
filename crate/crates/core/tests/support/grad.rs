//! Finite-difference gradient suite over every differentiable primitive, the
//! token-fusion rules, the codec and the end-to-end denoising loss.

use egowm::autodiff::{check_gradients, GradCheck, Graph, ParamId, ParamStore, Session, Var};
use egowm::config::RunConfig;
use egowm::error::Result;
use egowm::model::{adapter_residual, codec::Codec, fuse_hand_tokens, extend_sequence, WorldModel, Streams};
use egowm::nn::Linear;
use egowm::synth::generate_clip;
use egowm::tensor::{LayerSpec, Tensor};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 20;
const PROBES: usize = 12;

type Case = fn(u64) -> Result<GradCheck>;

/// Worst result of one named case over all instances.
#[derive(Clone, Debug)]
pub struct CaseReport {
    pub name: &'static str,
    pub instances: u64,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Smallest per-instance gradient magnitude; zero would mean an instance
    /// compared nothing but zeros.
    pub min_instance_grad: f64,
}

impl CaseReport {
    pub fn passes(&self) -> bool {
        self.instances >= INSTANCES && self.checked > 0 && self.min_instance_grad > 1e-8 && self.max_rel_error <= TOL
    }
}

pub fn run_case(name: &'static str, case: Case) -> CaseReport {
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut weakest = f64::INFINITY;
    for seed in 0..INSTANCES {
        match case(seed) {
            Ok(r) => {
                worst = worst.max(r.max_rel_error);
                checked += r.checked;
                weakest = weakest.min(r.max_abs_grad);
            }
            Err(e) => panic!("{name} instance {seed}: {e}"),
        }
    }
    CaseReport {
        name,
        instances: INSTANCES,
        max_rel_error: worst,
        checked,
        min_instance_grad: weakest,
    }
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(salt))
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r)
}

/// Reduce any output to a scalar with fixed random weights so every output
/// element carries a distinct cotangent.
fn probe<'g>(y: Var<'g, f64>) -> Result<Var<'g, f64>> {
    let w = Tensor::randn(&y.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(y.numel() as u64));
    Ok(y.mul(y.graph().constant(w))?.mean())
}

fn check(inputs: &[Tensor<f64>], f: impl for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>) -> Result<GradCheck> {
    check_gradients(inputs, STEP, PROBES, |g, v| probe(f(g, v)?))
}

fn small(r: &mut ChaCha8Rng) -> usize {
    r.random_range(1..=4)
}

fn add(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 1);
    let shape = [small(&mut r), small(&mut r) + 1];
    check(&[randn(&shape, &mut r), randn(&shape, &mut r)], |_, v| v[0].add(v[1]))
}

fn sub(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 2);
    let shape = [small(&mut r), small(&mut r) + 1];
    check(&[randn(&shape, &mut r), randn(&shape, &mut r)], |_, v| v[0].sub(v[1]))
}

fn mul(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 3);
    let shape = [small(&mut r), small(&mut r), 2];
    check(&[randn(&shape, &mut r), randn(&shape, &mut r)], |_, v| v[0].mul(v[1]))
}

fn scale(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 4);
    let c = r.random_range(-3.0..3.0);
    check(&[randn(&[small(&mut r), 3], &mut r)], move |_, v| Ok(v[0].scale(c)))
}

fn scale_by(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 5);
    check(&[randn(&[small(&mut r), 3], &mut r), randn(&[1], &mut r)], |_, v| v[0].scale_by(v[1]))
}

fn silu(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 6);
    let x = Tensor::randn(&[small(&mut r), 5], 3.0, &mut r);
    check(&[x], |_, v| Ok(v[0].silu()))
}

fn sum(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 7);
    check(&[randn(&[small(&mut r), small(&mut r)], &mut r)], |_, v| Ok(v[0].sum()))
}

fn mean(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 8);
    check(&[randn(&[small(&mut r), small(&mut r)], &mut r)], |_, v| Ok(v[0].mean()))
}

fn mse(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 9);
    let shape = [small(&mut r), 4];
    check(&[randn(&shape, &mut r), randn(&shape, &mut r)], |_, v| v[0].mse(v[1]))
}

fn reshape(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 10);
    let (a, b) = (small(&mut r), small(&mut r));
    check(&[randn(&[a, b, 2], &mut r)], move |_, v| v[0].reshape(&[b, 2 * a]))
}

fn permute(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 11);
    let shape = [small(&mut r), small(&mut r), small(&mut r) + 1, 2];
    let mut perm = vec![0, 1, 2, 3];
    for i in (1..4).rev() {
        perm.swap(i, r.random_range(0..=i));
    }
    check(&[randn(&shape, &mut r)], move |_, v| v[0].permute(&perm))
}

fn transpose(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 12);
    check(&[randn(&[small(&mut r), small(&mut r) + 1], &mut r)], |_, v| v[0].transpose())
}

fn slice(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 13);
    let shape = [small(&mut r) + 2, small(&mut r) + 2, 3];
    let axis = r.random_range(0..3);
    let start = r.random_range(0..shape[axis] - 1);
    let len = r.random_range(1..=shape[axis] - start);
    // Probe every element: a strided subset can miss the window entirely.
    check_gradients(&[randn(&shape, &mut r)], STEP, usize::MAX, move |_, v| probe(v[0].slice(axis, start, len)?))
}

fn concat(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 14);
    let axis = r.random_range(0..2);
    let mut a = [small(&mut r), 3];
    let mut b = a;
    a[axis] += 1;
    b[axis] = small(&mut r);
    check(&[randn(&a, &mut r), randn(&b, &mut r)], move |_, v| Var::concat(&[v[0], v[1]], axis))
}

fn add_row(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 15);
    let d = small(&mut r) + 1;
    check(&[randn(&[small(&mut r), 2, d], &mut r), randn(&[d], &mut r)], |_, v| v[0].add_row(v[1]))
}

fn mul_row(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 16);
    let d = small(&mut r) + 1;
    check(&[randn(&[small(&mut r), d], &mut r), randn(&[d], &mut r)], |_, v| v[0].mul_row(v[1]))
}

fn mean_last(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 17);
    check(&[randn(&[small(&mut r), small(&mut r) + 1], &mut r)], |_, v| Ok(v[0].mean_last()))
}

fn linear(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 18);
    let (n, din, dout) = (small(&mut r), small(&mut r) + 1, small(&mut r));
    let bias = seed % 2 == 0;
    let inputs = [randn(&[n, din], &mut r), randn(&[dout, din], &mut r), randn(&[dout], &mut r)];
    check(&inputs, move |_, v| v[0].linear(v[1], bias.then_some(v[2])))
}

fn conv3d(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 19);
    let (cin, cout) = (small(&mut r), small(&mut r));
    let k = [r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=3)];
    let st = [r.random_range(1..=2), r.random_range(1..=2), r.random_range(1..=2)];
    let pad = [k[0] / 2, k[1] / 2, k[2] / 2];
    let spec = LayerSpec::conv3d(cin, cout, k, st, pad);
    let x = randn(&[cin, 3, 4, 5], &mut r);
    let w = Tensor::randn(&[cout, cin, k[0], k[1], k[2]], 0.5, &mut r);
    check(&[x, w, randn(&[cout], &mut r)], move |_, v| v[0].conv(&spec, v[1], Some(v[2])))
}

fn causal_conv3d(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 20);
    let (cin, cout) = (small(&mut r), small(&mut r));
    let spec = LayerSpec::causal_conv3d(cin, cout, [3, 3, 3], [r.random_range(1..=2), 1, r.random_range(1..=2)]);
    let x = randn(&[cin, 5, 4, 4], &mut r);
    let w = Tensor::randn(&[cout, cin, 3, 3, 3], 0.3, &mut r);
    check(&[x, w, randn(&[cout], &mut r)], move |_, v| v[0].conv(&spec, v[1], Some(v[2])))
}

fn patchify(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 21);
    let (cin, cout) = (small(&mut r), small(&mut r) + 1);
    let spec = LayerSpec::patchify3d(cin, cout, [1, 2, 2]);
    let x = randn(&[cin, small(&mut r), 4, 6], &mut r);
    let w = randn(&[cout, cin, 1, 2, 2], &mut r);
    check(&[x, w, randn(&[cout], &mut r)], move |_, v| v[0].conv(&spec, v[1], Some(v[2])))
}

fn conv2d(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 22);
    let (cin, cout) = (small(&mut r), small(&mut r));
    let k = r.random_range(1..=3);
    let spec = LayerSpec::conv2d(cin, cout, k, r.random_range(1..=2), k / 2);
    let x = randn(&[cin, 5, 6], &mut r);
    let w = Tensor::randn(&[cout, cin, 1, k, k], 0.5, &mut r);
    check(&[x, w, randn(&[cout], &mut r)], move |_, v| v[0].conv2d(&spec, v[1], Some(v[2])))
}

fn group_norm(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 23);
    let groups = r.random_range(1..=3);
    let c = groups * r.random_range(1..=2);
    let affine = seed % 2 == 0;
    let x = Tensor::randn(&[c, 2, 3], 2.0, &mut r);
    let inputs = [x, randn(&[c], &mut r), randn(&[c], &mut r)];
    check(&inputs, move |_, v| {
        if affine {
            v[0].group_norm(groups, Some(v[1]), Some(v[2]))
        } else {
            v[0].group_norm(groups, None, None)
        }
    })
}

fn layer_norm(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 24);
    let x = Tensor::randn(&[small(&mut r), small(&mut r) + 2], 2.0, &mut r);
    check(&[x], |_, v| v[0].layer_norm())
}

fn attention(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 25);
    let heads = r.random_range(1..=2);
    let (d, dv) = (2 * heads, heads * small(&mut r));
    let (nq, nk) = (small(&mut r), small(&mut r));
    let batched = seed % 2 == 0;
    let lead = |n: usize, w: usize| if batched { vec![2, n, w] } else { vec![n, w] };
    let inputs = [randn(&lead(nq, d), &mut r), randn(&lead(nk, d), &mut r), randn(&lead(nk, dv), &mut r)];
    check(&inputs, move |_, v| v[0].attention(v[1], v[2], heads))
}

/// Queries from the main tokens only, keys and values over the extended
/// sequence `[main; object]`.
fn extended_kv_attention(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 26);
    let (n, m, d, heads) = (small(&mut r) + 1, small(&mut r), 4, 2);
    let inputs = [randn(&[n, d], &mut r), randn(&[m, d], &mut r)];
    check(&inputs, move |_, v| {
        let all = extend_sequence(v[0], v[1])?;
        all.attention(all, all, heads)?.slice(0, 0, n)
    })
}

fn rope(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 27);
    let heads = r.random_range(1..=2);
    let n = small(&mut r) + 1;
    let positions: Vec<[i64; 3]> = (0..n)
        .map(|_| [r.random_range(0..5), r.random_range(0..5), r.random_range(0..5)])
        .collect();
    let shift = [r.random_range(0..3), r.random_range(0..30), 0];
    check(&[randn(&[n, 6 * heads], &mut r)], move |_, v| v[0].rope(&positions, shift, heads))
}

fn fusion(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 28);
    let shape = [small(&mut r) + 1, 4];
    check(&[randn(&shape, &mut r), randn(&shape, &mut r), randn(&[1], &mut r)], |_, v| {
        fuse_hand_tokens(v[0], v[1], v[2])
    })
}

fn extension(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 29);
    let w = small(&mut r) + 1;
    check(&[randn(&[small(&mut r), w], &mut r), randn(&[small(&mut r), w], &mut r)], |_, v| {
        extend_sequence(v[0], v[1])?.layer_norm()
    })
}

/// Adapter residual on zero-padded ego-motion tokens, w.r.t. the tokens.
fn adapter(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 30);
    let (n, d) = (small(&mut r), 4);
    let len = n + r.random_range(0..3);
    let mut store = ParamStore::<f64>::new();
    let adapters = vec![Linear::zeros(&mut store, "a0", d, d)];
    randomize_zeros(&mut store, &mut r);
    check(&[randn(&[n, d], &mut r)], move |g, v| {
        let s = Session::inference(g, &store);
        Ok(adapter_residual(&s, &adapters, v[0], 0, len)?.expect("l < D"))
    })
}

/// Adapter residual w.r.t. the adapter weight and bias.
fn adapter_weights(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 31);
    let (n, d) = (small(&mut r), 4);
    let len = n + r.random_range(0..3);
    let mut store = ParamStore::<f64>::new();
    let adapters = vec![Linear::zeros(&mut store, "a0", d, d)];
    randomize_zeros(&mut store, &mut r);
    let eme = randn(&[n, d], &mut r);
    let ids: Vec<ParamId> = store.ids().collect();
    param_check(&mut store, &ids, |s| {
        probe(adapter_residual(s, &adapters, s.constant(eme.clone()), 0, len)?.expect("l < D"))
    })
}

/// Replace every all-zero parameter (zero-initialised gates, adapters, output
/// heads, biases) with small random values so that every path carries
/// gradient.
pub fn randomize_zeros(store: &mut ParamStore<f64>, r: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        if p.value.data().iter().all(|&v| v == 0.0) {
            p.value = Tensor::randn(p.value.shape(), 0.2, r);
        }
    }
}

/// Central differences of a parameter-store loss against reverse mode, on at
/// most `PROBES` elements of each listed parameter.
pub fn param_check<F>(store: &mut ParamStore<f64>, ids: &[ParamId], f: F) -> Result<GradCheck>
where
    F: for<'g, 's> Fn(&Session<'g, 's, f64>) -> Result<Var<'g, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let g = Graph::new();
        let s = Session::new(&g, store);
        let loss = f(&s)?;
        let grads = s.backward(loss)?;
        ids.iter()
            .map(|&id| grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).value.shape())))
            .collect()
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::new();
        let s = Session::inference(&g, store);
        Ok(f(&s)?.value().item())
    };
    let mut worst = 0.0f64;
    let mut largest = 0.0f64;
    let mut checked = 0;
    for (&id, a) in ids.iter().zip(&analytic) {
        let n = a.len();
        let stride = n.div_ceil(PROBES).max(1);
        for e in (0..n).step_by(stride) {
            let x0 = store.get(id).value.data()[e];
            store.get_mut(id).value.data_mut()[e] = x0 + STEP;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[e] = x0 - STEP;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[e] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max((a.data()[e] - numeric).abs() / a.data()[e].abs().max(1.0));
            largest = largest.max(a.data()[e].abs());
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
        max_abs_grad: largest,
    })
}

/// Smallest configuration that exercises every stream.
pub fn tiny_config() -> RunConfig {
    RunConfig {
        frames: 5,
        size: 16,
        latent_channels: 4,
        channel_div: 16,
        norm_groups: 1,
        width: 8,
        blocks: 2,
        adapter_depth: 1,
        heads: 2,
        mlp_ratio: 2,
        context_tokens: 2,
        ..RunConfig::default()
    }
}

/// Codec reconstruction loss w.r.t. one random encoder layer and the decoder.
fn codec(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 32);
    let cfg = tiny_config();
    let mut store = ParamStore::<f64>::new();
    let codec = Codec::new(&mut store, cfg.latent_channels, cfg.size, &mut r);
    randomize_zeros(&mut store, &mut r);
    let frames = Tensor::<f64>::uniform(&[cfg.frames, 3, cfg.size, cfg.size], 0.0, 1.0, &mut r);
    let names: Vec<String> = store.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.name.clone()).collect();
    let enc: Vec<&String> = names.iter().filter(|n| n.starts_with("codec.enc")).collect();
    let dec: Vec<&String> = names.iter().filter(|n| n.starts_with("codec.dec")).collect();
    let ids = [enc.choose(&mut r).unwrap(), dec.choose(&mut r).unwrap()].map(|n| store.id(n).unwrap());
    param_check(&mut store, &ids, |s| codec.reconstruction_loss(s, &frames))
}

/// Parameter groups of the world model, one probed parameter per group and
/// instance: every encoder, the fusion gate, the adapters and the blocks.
const GROUPS: &[&str] = &["hke.", "ref", "eme.", "oee.", "ctx.", "dit.gate_h", "dit.adapter.", "dit.block.", "dit."];

/// The full denoising loss of a randomly initialised tiny model on a
/// synthetic clip, all streams active.
fn end_to_end(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 33);
    let cfg = tiny_config();
    let mut store = ParamStore::<f64>::new();
    let model = WorldModel::new(&cfg, &mut store, &mut r)?;
    randomize_zeros(&mut store, &mut r);
    let clip = generate_clip(seed, cfg.frames, cfg.size)?.inputs();
    let prepared = model.prepare(&store, &clip)?;
    let z0 = prepared.z0.clone().expect("training clip");
    let eps = randn(z0.shape(), &mut r);
    let t = r.random_range(1..=cfg.diffusion_steps);
    let mut ids = Vec::new();
    for prefix in GROUPS {
        let group: Vec<ParamId> = store
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix) && !p.name.starts_with("codec"))
            .map(|(id, _)| id)
            .collect();
        assert!(!group.is_empty(), "no parameters under {prefix}");
        ids.push(*group.choose(&mut r).unwrap());
    }
    param_check(&mut store, &ids, |s| {
        let cond = model.condition(s, &prepared, Streams::ALL)?;
        model.training_loss(s, &z0, t, &eps, &cond)
    })
}

pub const CASES: &[(&str, Case)] = &[
    ("add", add),
    ("sub", sub),
    ("mul", mul),
    ("scale", scale),
    ("scale_by", scale_by),
    ("silu", silu),
    ("sum", sum),
    ("mean", mean),
    ("mse", mse),
    ("reshape", reshape),
    ("permute", permute),
    ("transpose", transpose),
    ("slice", slice),
    ("concat", concat),
    ("add_row", add_row),
    ("mul_row", mul_row),
    ("mean_last", mean_last),
    ("linear", linear),
    ("conv3d", conv3d),
    ("causal_conv3d", causal_conv3d),
    ("patchify3d", patchify),
    ("conv2d", conv2d),
    ("group_norm", group_norm),
    ("layer_norm", layer_norm),
    ("attention", attention),
    ("attention_extended_kv", extended_kv_attention),
    ("rope", rope),
    ("fuse_hand_tokens", fusion),
    ("extend_sequence", extension),
    ("adapter_residual", adapter),
    ("adapter_weights", adapter_weights),
    ("codec", codec),
    ("end_to_end_loss", end_to_end),
];

pub fn case(name: &str) -> Case {
    CASES.iter().find(|(n, _)| *n == name).map(|(_, c)| *c).expect("known case")
}
