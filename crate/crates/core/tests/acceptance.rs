//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so the lines always print.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ddhf_core::bev::FeatureMap;
use ddhf_core::config::Config;
use ddhf_core::curve::{cross_merge_2d, hilbert_index, hilbert_point, scan_orders_2d};
use ddhf_core::decoder::{mmvfm_mix, voxel_pool, MixWeights};
use ddhf_core::eval::eval_detections;
use ddhf_core::geometry::{BevFrame, GridSpec};
use ddhf_core::hbf::{cb_gates, cb_mamba, cb_params, sparse_height_compress, CbMambaWeights};
use ddhf_core::hvf::{cv_mamba, cv_merge, cv_split};
use ddhf_core::io::detections_to_json;
use ddhf_core::oracle;
use ddhf_core::pipeline::{run_pipeline, Weights};
use ddhf_core::pqg::{build_mask, nms_topk, nms_topk_masked, Heatmap};
use ddhf_core::rng::{ParamInit, PrngState};
use ddhf_core::scene::{gen_scene, SceneSpec};
use ddhf_core::ssm::{selective_scan, selective_scan_chunked, ScanParams, SsmBlockWeights};
use ddhf_core::viewtrans::fps;
use ddhf_core::voxel::{Coord, SparseVoxelSet};
use ddhf_core::Tensor;

type Check = fn() -> Result<String, String>;

fn random(rng: &mut PrngState, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.uniform(lo, hi) as f32).collect()).unwrap()
}

fn rel_err(got: &Tensor, want: &Tensor) -> f64 {
    got.data()
        .iter()
        .zip(want.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs() / (b as f64).abs().max(1.0))
        .fold(0.0, f64::max)
}

fn within(t: Instant, limit: Duration) -> Result<Duration, String> {
    let e = t.elapsed();
    if e < limit {
        Ok(e)
    } else {
        Err(format!("took {e:.2?}, limit {limit:?}"))
    }
}

fn scan_equivalence() -> Result<String, String> {
    let t = Instant::now();
    let mut rng = PrngState::new(1);
    let mut worst = 0f64;
    for case in 0..200 {
        let n = 1 + rng.below(256);
        let ch = 1 + rng.below(32);
        let ns = 1 + rng.below(16);
        let x = random(&mut rng, &[n, ch], -1.0, 1.0);
        let a = random(&mut rng, &[ch, ns], -2.0, -0.05);
        let p = ScanParams {
            b: random(&mut rng, &[n, ns], -1.0, 1.0),
            c: random(&mut rng, &[n, ns], -1.0, 1.0),
            delta: random(&mut rng, &[n, ch], 0.001, 0.5),
        };
        let seq = selective_scan(&x, &a, &p).map_err(|e| e.to_string())?;
        let dense = oracle::ssm_dense(&x, &a, &p.b, &p.c, &p.delta);
        worst = worst.max(rel_err(&seq, &dense));
        for chunk in [1, 7, 64, n] {
            let ck = selective_scan_chunked(&x, &a, &p, chunk).map_err(|e| e.to_string())?;
            worst = worst.max(rel_err(&ck, &seq)).max(rel_err(&ck, &dense));
        }
        if worst > 1e-5 {
            return Err(format!("case {case} (n={n}, C={ch}): relative error {worst:.2e}"));
        }
    }
    let e = within(t, Duration::from_secs(10))?;
    Ok(format!("200 cases, max relative error {worst:.2e}, {e:.2?}"))
}

fn hilbert_suite() -> Result<String, String> {
    let t = Instant::now();
    for bits in 1..=3u32 {
        let side = 1u32 << bits;
        let n = (side as u64).pow(3);
        let mut seen = BTreeSet::new();
        let mut prev: Option<Coord> = None;
        for i in 0..n {
            let p = hilbert_point(i, bits).map_err(|e| e.to_string())?;
            if p.iter().any(|&v| v >= side) {
                return Err(format!("b={bits}: index {i} decodes outside the cube: {p:?}"));
            }
            if hilbert_index(p[0], p[1], p[2], bits).map_err(|e| e.to_string())? != i {
                return Err(format!("b={bits}: index {i} does not roundtrip"));
            }
            if !seen.insert(p) {
                return Err(format!("b={bits}: {p:?} visited twice"));
            }
            if let Some(q) = prev {
                let d: u32 = (0..3).map(|a| p[a].abs_diff(q[a])).sum();
                if d != 1 {
                    return Err(format!("b={bits}: step {} -> {i} has L1 distance {d}", i - 1));
                }
            }
            prev = Some(p);
        }
        if seen.len() as u64 != n {
            return Err(format!("b={bits}: {} of {n} cells reached", seen.len()));
        }
    }
    let e = within(t, Duration::from_secs(1))?;
    Ok(format!("b in 1..=3 bijective and unit-step, {e:.2?}"))
}

fn random_voxels(rng: &mut PrngState, grid: GridSpec, count: usize, c: usize) -> SparseVoxelSet {
    let coords: BTreeSet<Coord> =
        (0..count).map(|_| [0, 1, 2].map(|a| rng.below(grid.extents[a] as usize) as u32)).collect();
    let coords: Vec<Coord> = coords.into_iter().collect();
    let feats = random(rng, &[coords.len(), c], -1.0, 1.0);
    SparseVoxelSet::new(coords, feats, grid).unwrap()
}

fn map(rng: &mut PrngState, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::new(random(rng, &[h, w, c], -1.0, 1.0), BevFrame { origin: [0.0; 2], cell: [1.0; 2] }).unwrap()
}

fn oracle_batch() -> Result<String, String> {
    const CASES: usize = 100;
    let mut rng = PrngState::new(3);
    for case in 0..CASES {
        // quantized scores so plateaus and ties occur
        let (k, h, w) = (1 + rng.below(3), 2 + rng.below(12), 2 + rng.below(12));
        let data = (0..k * h * w).map(|_| rng.below(8) as f32 / 8.0).collect();
        let hm = Heatmap::new(Tensor::new(vec![k, h, w], data).unwrap()).unwrap();
        let top = 1 + rng.below(20);
        let got: Vec<_> = nms_topk(&hm, top).iter().map(|p| (p.class_id, p.row, p.col)).collect();
        if got != oracle::nms_topk(&hm.data, top) {
            return Err(format!("nms_topk case {case}"));
        }
    }
    for case in 0..CASES {
        let n = 1 + rng.below(60);
        let pts: Vec<[f64; 3]> = (0..n).map(|_| [0, 1, 2].map(|_| (rng.below(6) as f64) * 0.5)).collect();
        let target = 1 + rng.below(n);
        if fps(&pts, target).map_err(|e| e.to_string())? != oracle::fps_greedy(&pts, target) {
            return Err(format!("fps case {case}"));
        }
    }
    for case in 0..CASES {
        let grid = GridSpec { origin: [0.0; 3], voxel_size: [1.0; 3], extents: [1 + rng.below(6) as u32, 1 + rng.below(6) as u32, 1 + rng.below(4) as u32] };
        let (count, c) = (rng.below(40), 1 + rng.below(4));
        let v = random_voxels(&mut rng, grid, count, c);
        if sparse_height_compress(&v).data != oracle::height_compress(&v) {
            return Err(format!("sparse_height_compress case {case}"));
        }
    }
    let mut worst = 0f32;
    for case in 0..CASES {
        let grid = GridSpec { origin: [-2.0; 3], voxel_size: [0.5, 0.5, 1.0], extents: [8, 8, 4] };
        let v = random_voxels(&mut rng, grid, 60, 3);
        let pts: Vec<[f64; 3]> = (0..30).map(|_| [rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)]).collect();
        let d = voxel_pool(&v, &v.lookup(), &pts).max_abs_diff(&oracle::voxel_pool(&v, &pts));
        worst = worst.max(d);
        if d > 1e-5 {
            return Err(format!("voxel_pool case {case}: {d:.2e}"));
        }
    }
    for case in 0..CASES {
        let (h, w, c) = (1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(4));
        let outs: [Tensor; 4] = std::array::from_fn(|_| random(&mut rng, &[h * w, c], -1.0, 1.0));
        let got = cross_merge_2d(&outs, &scan_orders_2d(h, w).unwrap()).map_err(|e| e.to_string())?;
        let d = got.max_abs_diff(&oracle::cross_merge(&outs, h, w));
        worst = worst.max(d);
        if d > 1e-5 {
            return Err(format!("cross_merge_2d case {case}: {d:.2e}"));
        }
    }
    for case in 0..CASES {
        let (qd, c, g) = (1 + rng.below(8), 1 + rng.below(8), 4 * (1 + rng.below(4)));
        let q = random(&mut rng, &[qd], -1.0, 1.0).into_data();
        let f = random(&mut rng, &[g, c], -1.0, 1.0);
        let off: Vec<[f64; 3]> = (0..g).map(|_| [0, 1, 2].map(|_| rng.uniform(-2.0, 2.0))).collect();
        let mw = MixWeights::init(&ParamInit::new(case as u64), qd, c, g);
        let got = mmvfm_mix(&q, &f, &off, &mw).map_err(|e| e.to_string())?;
        let want = oracle::mix_scalar(&q, &f, &off, &mw);
        let d = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        worst = worst.max(d);
        if d > 1e-5 || got.len() != want.len() {
            return Err(format!("mmvfm_mix case {case}: {d:.2e}"));
        }
    }
    for case in 0..CASES {
        let (h, w, c, n) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
        let cw = CbMambaWeights::init(&ParamInit::new(1000 + case as u64), c, n, 8);
        let (bi, bl) = (map(&mut rng, h, w, c), map(&mut rng, h, w, c));
        let got = cb_mamba(&bi, &bl, &cw).map_err(|e| e.to_string())?;
        let d = got.data.max_abs_diff(&oracle::cb_mamba_scalar(&bi.data, &bl.data, &cw));
        worst = worst.max(d);
        if d > 1e-5 {
            return Err(format!("cb_mamba case {case}: {d:.2e}"));
        }
    }
    Ok(format!("7 ops x {CASES} instances, discrete exact, float max diff {worst:.2e}"))
}

fn gate_identity() -> Result<String, String> {
    let mut rng = PrngState::new(4);
    let mut worst = 0f32;
    for case in 0..50 {
        let (h, w, c, n) = (1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(8));
        let cw = CbMambaWeights::init(&ParamInit::new(case), c, n, 16);
        let t = cb_params(&map(&mut rng, h, w, c), &map(&mut rng, h, w, c), &cw).map_err(|e| e.to_string())?;
        let (yi, yl) = cb_gates(&t, &cw).map_err(|e| e.to_string())?;
        for (a, b) in yi.data().iter().zip(yl.data()) {
            worst = worst.max((a + b - 1.0).abs());
        }
    }
    if worst > 1e-6 {
        return Err(format!("max |Y_I + Y_L - 1| = {worst:.2e}"));
    }
    Ok(format!("50 invocations, max |Y_I + Y_L - 1| = {worst:.2e}"))
}

fn merge_split() -> Result<String, String> {
    let mut rng = PrngState::new(5);
    let mut coincident = 0usize;
    for case in 0..100 {
        let side = 2 + rng.below(7) as u32;
        let lg = GridSpec { origin: [0.0; 3], voxel_size: [1.0, 1.0, 2.0], extents: [side, side, 1 + rng.below(3) as u32] };
        let c = 1 + rng.below(6);
        let count = rng.below(50);
        let l = random_voxels(&mut rng, lg, count, c);
        let mut img: BTreeSet<Coord> = (0..rng.below(50))
            .map(|_| [0, 1, 2].map(|a| rng.below(lg.image_companion().extents[a] as usize) as u32))
            .collect();
        // force shared cells: image voxels directly above LiDAR voxels
        for p in l.coords.iter().take(3) {
            img.insert([p[0], p[1], 2 * p[2]]);
            coincident += 1;
        }
        let img: Vec<Coord> = img.into_iter().collect();
        let i = SparseVoxelSet::new(img.clone(), random(&mut rng, &[img.len(), c], -1.0, 1.0), lg.image_companion()).unwrap();
        let merged = cv_merge(&l, &i).map_err(|e| e.to_string())?;
        let (l2, i2) = cv_split(&merged).map_err(|e| e.to_string())?;
        if l2 != l || i2 != i {
            return Err(format!("case {case}: plain roundtrip differs"));
        }
        let mut w = SsmBlockWeights::init(&ParamInit::new(case as u64), c, 4);
        w.make_identity();
        let (l3, i3) = cv_split(&cv_mamba(&merged, &w).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        if l3 != l || i3 != i {
            return Err(format!("case {case}: identity CV block changed features"));
        }
    }
    Ok(format!("100 pairs, {coincident} forced coincident cells, exact"))
}

fn mask_law() -> Result<String, String> {
    let mut rng = PrngState::new(6);
    let mut hard_total = 0usize;
    for case in 0..100 {
        let (k, h, w) = (1 + rng.below(4), 3 + rng.below(20), 3 + rng.below(20));
        let kernel = [1, 3, 5][rng.below(3)];
        let levels = [4, 16, 1 << 20][rng.below(3)];
        let mut heat = || {
            let data = (0..k * h * w).map(|_| rng.below(levels) as f32 / levels as f32).collect();
            Heatmap::new(Tensor::new(vec![k, h, w], data).unwrap()).unwrap()
        };
        let (h1, h2) = (heat(), heat());
        let easy = nms_topk(&h1, 1 + rng.below(10));
        let pos: Vec<(usize, usize)> = easy.iter().map(|p| (p.row, p.col)).collect();
        let mask = build_mask(&pos, h, w, kernel).map_err(|e| e.to_string())?;
        let hard = nms_topk_masked(&h2, &mask, 1 + rng.below(30)).map_err(|e| e.to_string())?;
        hard_total += hard.len();
        let r = kernel / 2;
        for q in &hard {
            if pos.iter().any(|&(er, ec)| er.abs_diff(q.row) <= r && ec.abs_diff(q.col) <= r) {
                return Err(format!("case {case}: hard query at ({}, {}) inside an easy kernel", q.row, q.col));
            }
        }
    }
    Ok(format!("100 heatmaps, {hard_total} hard queries, none inside an easy kernel"))
}

fn fixture() -> SceneSpec {
    SceneSpec::from_json(include_str!("fixtures/three_objects.json")).unwrap()
}

fn identity_end_to_end() -> Result<String, String> {
    let t = Instant::now();
    let g = gen_scene(&fixture()).map_err(|e| e.to_string())?;
    let cfg = Config::default();
    let out = run_pipeline(&g.scene, &cfg, &Weights::pass_through(&cfg, cfg.seed)).map_err(|e| e.to_string())?;
    let near = |c: &[f64; 3]| out.easy.iter().zip(&out.passthrough).filter(|(_, d)| (d.center[0] - c[0]).hypot(d.center[1] - c[1]) <= 2.0).count();
    let hits: Vec<usize> = g.gt.iter().map(|gt| near(&gt.center)).collect();
    let found = hits.iter().filter(|&&h| h > 0).count();
    let total: usize = hits.iter().sum();
    if found < g.gt.len() || total < 3 {
        return Err(format!("easy queries within 2 m per object: {hits:?}"));
    }
    let r = eval_detections(&out.passthrough, &g.gt);
    for (class, aps) in &r.per_class {
        if aps[3] != 1.0 {
            return Err(format!("class {class}: AP@4m = {}", aps[3]));
        }
    }
    let e = within(t, Duration::from_secs(30))?;
    Ok(format!("{total} easy queries within 2 m of {found} objects, AP@4m = 1.0 for classes {:?}, {e:.2?}", r.per_class.keys().collect::<Vec<_>>()))
}

fn config_fidelity() -> Result<String, String> {
    let c = Config::default();
    let (lo, hi) = c.lidar_grid.range();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    let checks = [
        ("d", c.depth_threshold == 0.01),
        ("s", c.semantic_threshold == 0.25),
        ("N", c.max_image_voxels == 18000),
        ("x,y range", close(lo[0], -54.0) && close(hi[0], 54.0) && close(lo[1], -54.0) && close(hi[1], 54.0)),
        ("z range", close(lo[2], -5.0) && close(hi[2], 3.0)),
        ("strides", c.strides == [1, 2, 4]),
        ("N_bev", c.n_bev == 3),
        ("M_vox", c.m_vox == 1),
        ("image grid", c.lidar_grid.check_image_grid(&c.image_grid).is_ok()),
    ];
    let bad: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    if !bad.is_empty() {
        return Err(format!("defaults differ: {bad:?}"));
    }
    let text = serde_json::to_string(&c).map_err(|e| e.to_string())?;
    if Config::from_json(&text).map_err(|e| e.to_string())? != c {
        return Err("defaults do not roundtrip through JSON".into());
    }
    Ok("d=0.01 s=0.25 N=18000 range [-54,54]/[-5,3] strides [1,2,4] N_bev=3 M_vox=1".into())
}

fn determinism() -> Result<String, String> {
    let g = gen_scene(&fixture()).map_err(|e| e.to_string())?;
    let cfg = Config::default();
    let w = Weights::init(&cfg, 7);
    let run = |s: &ddhf_core::Scene| run_pipeline(s, &cfg, &w).map(|o| detections_to_json(&o.detections)).map_err(|e| e.to_string());
    let a = run(&g.scene)?;
    let b = run(&g.scene)?;
    if a != b {
        return Err("repeated runs differ".into());
    }
    let mut no_cam = g.scene.clone();
    no_cam.images.clear();
    no_cam.cameras.clear();
    let mut no_pts = g.scene.clone();
    no_pts.points = Tensor::zeros(&[0, 4]);
    let (nc, np) = (run(&no_cam)?, run(&no_pts)?);
    Ok(format!("{} bytes identical across runs; image-free and point-free runs complete ({} / {} bytes)", a.len(), nc.len(), np.len()))
}

fn main() {
    let checks: [(&str, Check); 9] = [
        ("scan equivalence", scan_equivalence),
        ("hilbert suite", hilbert_suite),
        ("oracle equivalence batch", oracle_batch),
        ("gate identity", gate_identity),
        ("merge/split roundtrip", merge_split),
        ("pqg mask law", mask_law),
        ("identity end-to-end", identity_end_to_end),
        ("configuration fidelity", config_fidelity),
        ("determinism and robustness", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let res = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match res {
            Ok(msg) => println!("criterion {}: PASS {name}: {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {msg}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
