use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ddhf_bench::random_tensor;
use ddhf_core::bev::FeatureMap;
use ddhf_core::config::Config;
use ddhf_core::curve::hilbert_order;
use ddhf_core::geometry::BevFrame;
use ddhf_core::hbf::{cb_mamba, ib_mamba, CbMambaWeights, IbMambaWeights};
use ddhf_core::pipeline::{run_pipeline, Weights};
use ddhf_core::pqg::{nms_topk, Heatmap};
use ddhf_core::rng::{ParamInit, PrngState};
use ddhf_core::scene::{gen_scene, SceneSpec};
use ddhf_core::ssm::{selective_scan, selective_scan_chunked, ScanParams};
use ddhf_core::viewtrans::fps;

fn scans(c: &mut Criterion) {
    let mut g = c.benchmark_group("selective_scan");
    for n in [256, 4096] {
        let (ch, ns) = (16, 16);
        let x = random_tensor(1, &[n, ch], -1.0, 1.0);
        let a = random_tensor(2, &[ch, ns], -2.0, -0.1);
        let p = ScanParams {
            b: random_tensor(3, &[n, ns], -1.0, 1.0),
            c: random_tensor(4, &[n, ns], -1.0, 1.0),
            delta: random_tensor(5, &[n, ch], 0.01, 0.1),
        };
        g.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, _| b.iter(|| selective_scan(black_box(&x), &a, &p)));
        g.bench_with_input(BenchmarkId::new("chunked_64", n), &n, |b, _| {
            b.iter(|| selective_scan_chunked(black_box(&x), &a, &p, 64))
        });
    }
    g.finish();
}

fn discrete(c: &mut Criterion) {
    let mut rng = PrngState::new(6);
    let coords: Vec<[u32; 3]> = (0..20_000).map(|_| [0, 1, 2].map(|_| rng.below(256) as u32)).collect();
    c.bench_function("hilbert_order_20k", |b| b.iter(|| hilbert_order(black_box(&coords), 8)));

    let pts: Vec<[f64; 3]> = (0..5_000).map(|_| [0, 1, 2].map(|_| rng.uniform(-50.0, 50.0))).collect();
    c.bench_function("fps_5k_to_1k", |b| b.iter(|| fps(black_box(&pts), 1_000)));

    let heat = Heatmap::new(random_tensor(7, &[10, 72, 72], 0.0, 1.0)).unwrap();
    c.bench_function("nms_topk_10x72x72", |b| b.iter(|| nms_topk(black_box(&heat), 100)));
}

fn bev_blocks(c: &mut Criterion) {
    let frame = BevFrame { origin: [0.0; 2], cell: [1.0; 2] };
    let map = |seed| FeatureMap::new(random_tensor(seed, &[36, 36, 32], -1.0, 1.0), frame).unwrap();
    let (bi, bl) = (map(8), map(9));
    let ib = IbMambaWeights::init(&ParamInit::new(10), 32, 16);
    let cb = CbMambaWeights::init(&ParamInit::new(11), 32, 16, 64);
    c.bench_function("ib_mamba_36x36x32", |b| b.iter(|| ib_mamba(black_box(&bl), &ib)));
    c.bench_function("cb_mamba_36x36x32", |b| b.iter(|| cb_mamba(black_box(&bi), &bl, &cb)));
}

fn end_to_end(c: &mut Criterion) {
    let spec = SceneSpec::from_json(include_str!("../../core/tests/fixtures/three_objects.json")).unwrap();
    let scene = gen_scene(&spec).unwrap().scene;
    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);
    for cap in [4_500, 9_000, 18_000] {
        let cfg = Config { max_image_voxels: cap, ..Config::default() };
        let w = Weights::init(&cfg, cfg.seed);
        g.bench_with_input(BenchmarkId::new("safs_cap", cap), &cap, |b, _| b.iter(|| run_pipeline(black_box(&scene), &cfg, &w)));
    }
    g.finish();
}

criterion_group!(benches, scans, discrete, bev_blocks, end_to_end);
criterion_main!(benches);
