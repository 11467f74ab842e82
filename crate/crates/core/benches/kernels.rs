//! Sequential versus rayon-parallel execution of the hot kernels and of one
//! full desk-scale denoiser step.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use egowm::autodiff::{Graph, ParamStore, Session};
use egowm::config::RunConfig;
use egowm::model::{Streams, WorldModel};
use egowm::par;
use egowm::synth::generate_clip;
use egowm::tensor::kernels::gemm_nn;
use egowm::tensor::{LayerSpec, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn gemm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 192;
    let a = Tensor::<f32>::randn(&[n, n], 1.0, &mut rng);
    let b = Tensor::<f32>::randn(&[n, n], 1.0, &mut rng);
    let mut g = c.benchmark_group("gemm_192");
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(name, |bench| bench.iter(|| gemm_nn(a.data(), b.data(), n, n, n)));
    }
    g.finish();
}

fn layers(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f32>::randn(&[16, 5, 32, 32], 1.0, &mut rng);
    let spec = LayerSpec::conv3d(16, 32, [3, 3, 3], [1, 2, 2], [1, 1, 1]);
    let w = Tensor::<f32>::randn(&[32, 16, 3, 3, 3], 0.1, &mut rng);
    let tokens = Tensor::<f32>::randn(&[256, 64], 1.0, &mut rng);
    let store = ParamStore::<f32>::new();
    let mut g = c.benchmark_group("layers");
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_with_input(BenchmarkId::new("conv3d", name), &x, |bench, x| {
            bench.iter(|| {
                let graph = Graph::new();
                let s = Session::inference(&graph, &store);
                s.constant(x.clone()).conv(&spec, s.constant(w.clone()), None).unwrap().value()
            })
        });
        g.bench_with_input(BenchmarkId::new("group_norm", name), &x, |bench, x| {
            bench.iter(|| {
                let graph = Graph::new();
                let s = Session::inference(&graph, &store);
                s.constant(x.clone()).group_norm(4, None, None).unwrap().value()
            })
        });
        g.bench_with_input(BenchmarkId::new("attention", name), &tokens, |bench, t| {
            bench.iter(|| {
                let graph = Graph::new();
                let s = Session::inference(&graph, &store);
                let q = s.constant(t.clone());
                q.attention(q, q, 2).unwrap().value()
            })
        });
    }
    g.finish();
}

fn denoiser(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::<f32>::new();
    let model = WorldModel::new(&cfg, &mut store, &mut rng).unwrap();
    let clip = generate_clip(0, cfg.frames, cfg.size).unwrap();
    let prepared = model.prepare(&store, &clip.inputs()).unwrap();
    let z = Tensor::<f32>::randn(&model.latent_shape(), 1.0, &mut rng);
    let mut g = c.benchmark_group("denoiser_step");
    g.sample_size(20);
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(name, |bench| {
            bench.iter(|| {
                let graph = Graph::new();
                let s = Session::inference(&graph, &store);
                let cond = model.condition(&s, &prepared, Streams::ALL).unwrap();
                model.denoise(&s, s.constant(z.clone()), 500, &cond).unwrap().value()
            })
        });
    }
    g.finish();
    par::set_parallel(true);
}

criterion_group!(benches, gemm, layers, denoiser);
criterion_main!(benches);
