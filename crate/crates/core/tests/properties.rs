use std::fs;

use ddhf_core::config::Config;
use ddhf_core::pipeline::Weights;
use ddhf_core::scene::{gen_scene, write_scene, SceneSpec};
use ddhf_core::viewtrans::{encode_image, safs_select, SafsParams};
use ddhf_core::{load_scene, run_pipeline};

fn fixture() -> SceneSpec {
    SceneSpec::from_json(include_str!("fixtures/three_objects.json")).unwrap()
}

#[test]
fn scene_files_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_scene(a.path(), &gen_scene(&fixture()).unwrap()).unwrap();
    write_scene(b.path(), &gen_scene(&fixture()).unwrap()).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 4 + 3);
    for n in names {
        assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn loaded_scene_runs_like_generated() {
    let g = gen_scene(&fixture()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_scene(dir.path(), &g).unwrap();
    let mut cfg = Config::default();
    cfg.max_image_voxels = 1000;
    let w = Weights::init(&cfg, 5);
    let a = run_pipeline(&g.scene, &cfg, &w).unwrap();
    let b = run_pipeline(&load_scene(dir.path()).unwrap(), &cfg, &w).unwrap();
    assert_eq!(a.detections, b.detections);
}

#[test]
fn safs_cap_is_monotone() {
    let g = gen_scene(&fixture()).unwrap();
    let cfg = Config::default();
    let w = Weights::init(&cfg, 9);
    let feats: Vec<_> = g.scene.images.iter().map(|i| encode_image(i, &w.image_encoder).unwrap()).collect();
    let mut last = 0;
    for cap in [250, 500, 1000, 2000, 4000] {
        let p = SafsParams { max_voxels: cap, ..cfg.safs() };
        let n = safs_select(&cfg.image_grid, &feats, &g.scene.cameras, &cfg.depth_bins, &p).unwrap().len();
        assert!(n >= last && n <= cap, "cap {cap}: {n} after {last}");
        last = n;
    }
}
