//! End-to-end inference: voxelization, view transform, voxel fusion, BEV
//! fusion, query generation and decoding.

use std::time::Instant;

use log::info;
use serde::Serialize;

use crate::bev::FeatureMap;
use crate::config::Config;
use crate::decoder::{decode, passthrough_boxes, DecoderDims, DecoderWeights, DetectionBox};
use crate::error::{ensure, Result};
use crate::hbf::{hbf_forward, sparse_height_compress, HbfDims, HbfWeights};
use crate::hvf::{hvf_forward, HvfWeights};
use crate::nn::Linear;
use crate::pqg::{pqg_forward, PqgWeights, Query};
use crate::rng::ParamInit;
use crate::scene::Scene;
use crate::viewtrans::{encode_image, lss_splat, safs_select, ImageEncoderWeights};
use crate::voxel::{voxelize, SparseVoxelSet, POINT_FEATURES};

/// Slope and offset of the class-0 logit over the 3x3 density sum in the
/// pass-through heatmap head. Small enough that the sigmoid stays ordered
/// for a few hundred points per window.
const PASS_ALPHA: f32 = 0.05;
const PASS_BETA: f32 = 3.0;
const PASS_OFF: f32 = -20.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub image_encoder: ImageEncoderWeights,
    /// Raw voxel statistics to the voxel width.
    pub lidar_stem: Linear,
    /// Sampled image features to the voxel width.
    pub image_stem: Linear,
    pub hvf: HvfWeights,
    pub hbf: HbfWeights,
    pub pqg: PqgWeights,
    pub decoder: DecoderWeights,
}

impl Weights {
    pub fn init(cfg: &Config, seed: u64) -> Self {
        let p = ParamInit::new(seed);
        let c = cfg.channels;
        Self {
            image_encoder: ImageEncoderWeights::init(&p.sub("image_encoder"), c.image, cfg.depth_bins.count),
            lidar_stem: Linear::init(&p, "lidar_stem", c.voxel, POINT_FEATURES),
            image_stem: Linear::init(&p, "image_stem", c.voxel, c.image),
            hvf: HvfWeights::init(&p.sub("hvf"), c.voxel, c.d_state),
            hbf: HbfWeights::init(
                &p.sub("hbf"),
                HbfDims {
                    lidar_bev: c.voxel,
                    image_bev: c.image,
                    voxel: c.voxel,
                    bev: c.bev,
                    d_state: c.d_state,
                    cb_hidden: c.cb_hidden,
                },
            ),
            pqg: PqgWeights::init(&p.sub("pqg"), c.bev, c.hidden, cfg.num_classes),
            decoder: DecoderWeights::init(
                &p.sub("decoder"),
                DecoderDims {
                    query: c.bev,
                    voxel: c.voxel,
                    hidden: c.hidden,
                    classes: cfg.num_classes,
                    grid_side: cfg.grid_side,
                    n_bev: cfg.n_bev,
                    m_vox: cfg.m_vox,
                },
            ),
        }
    }

    /// Weights that carry the LiDAR point count unchanged to channel 0 of
    /// the fused BEV map, with every residual block reduced to its skip
    /// path and the image branch silenced. The first heatmap head scores
    /// class 0 by a 3x3 density sum; other classes stay near zero.
    pub fn pass_through(cfg: &Config, seed: u64) -> Self {
        let mut w = Self::init(cfg, seed);
        let c = cfg.channels;
        w.lidar_stem = Linear::zeros(c.voxel, POINT_FEATURES);
        w.lidar_stem.weight.data_mut()[POINT_FEATURES - 1] = 1.0;
        w.image_stem = Linear::zeros(c.voxel, c.image);
        w.hvf.make_identity();
        w.hbf.make_identity();
        // B_L and its compressed twin both hold the count; the fusion block
        // averages the two modalities, so the image side contributes zero
        // and the sum comes back halved.
        w.hbf.proj_lidar = Linear::zeros(c.bev, 2 * c.voxel);
        w.hbf.proj_lidar.weight.data_mut()[0] = 1.0;
        w.hbf.proj_lidar.weight.data_mut()[c.voxel] = 1.0;
        w.hbf.proj_image = Linear::zeros(c.bev, c.image + c.voxel);
        let head = &mut w.pqg.head1;
        head.zero();
        // Center-weighted so neighbouring windows over the same object
        // rarely tie, which would leave a plateau for NMS to keep twice.
        for tap in 0..9 {
            let (dy, dx) = (tap / 3, tap % 3);
            let taper = (dy != 1) as i32 + (dx != 1) as i32;
            head.conv.weight.data_mut()[tap * c.bev] = 0.5f32.powi(taper);
        }
        head.out.weight.data_mut()[0] = PASS_ALPHA;
        head.out.bias[0] = -PASS_BETA;
        head.out.bias[1..].fill(PASS_OFF);
        w.pqg.hia.block.make_identity();
        w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub name: &'static str,
    pub ms: f64,
    /// Bytes held by intermediate results after the stage.
    pub live_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub stages: Vec<StageReport>,
    pub peak_live_bytes: usize,
    pub points: usize,
    pub lidar_voxels: usize,
    pub image_voxels: usize,
    /// `(lidar, image)` voxel counts entering each fusion scale.
    pub scale_counts: Vec<(usize, usize)>,
    pub easy_queries: usize,
    pub hard_queries: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub detections: Vec<DetectionBox>,
    /// Boxes placed directly at the easy-query cells.
    pub passthrough: Vec<DetectionBox>,
    pub easy: Vec<Query>,
    pub hard: Vec<Query>,
    pub report: RunReport,
}

fn voxel_bytes(v: &SparseVoxelSet) -> usize {
    v.len() * 12 + v.feats.data().len() * 4
}

fn map_bytes(m: &FeatureMap) -> usize {
    m.data.data().len() * 4
}

struct Timer {
    stages: Vec<StageReport>,
    start: Instant,
}

impl Timer {
    fn lap(&mut self, name: &'static str, live_bytes: usize) {
        let ms = self.start.elapsed().as_secs_f64() * 1e3;
        info!("{name}: {ms:.1} ms, ~{} KiB live", live_bytes / 1024);
        self.stages.push(StageReport { name, ms, live_bytes });
        self.start = Instant::now();
    }
}

fn stem(v: &SparseVoxelSet, w: &Linear) -> Result<SparseVoxelSet> {
    v.with_feats(w.forward(&v.feats)?)
}

pub fn run_pipeline(scene: &Scene, cfg: &Config, w: &Weights) -> Result<RunOutput> {
    cfg.validate()?;
    ensure!(scene.images.len() == scene.cameras.len(), Shape, "{} images for {} cameras", scene.images.len(), scene.cameras.len());
    let c = cfg.channels;
    let mut t = Timer { stages: Vec::new(), start: Instant::now() };

    let raw = voxelize(&scene.points, &cfg.lidar_grid)?;
    t.lap("voxelize", voxel_bytes(&raw));

    let feats = scene.images.iter().map(|img| encode_image(img, &w.image_encoder)).collect::<Result<Vec<_>>>()?;
    let feat_bytes: usize = feats.iter().map(|f| (f.feats.data().len() + f.depth.data().len() + f.semantic.data().len()) * 4).sum();
    t.lap("image_encoder", voxel_bytes(&raw) + feat_bytes);

    let sampled = safs_select(&cfg.image_grid, &feats, &scene.cameras, &cfg.depth_bins, &cfg.safs())?;
    let sampled = if sampled.channels() == c.image { sampled } else { SparseVoxelSet::empty(cfg.image_grid, c.image) };
    let b_image = lss_splat(&feats, &scene.cameras, &cfg.depth_bins, &cfg.lidar_grid, c.image)?;
    drop(feats);
    t.lap("view_transform", voxel_bytes(&raw) + voxel_bytes(&sampled) + map_bytes(&b_image));

    let v_lidar = stem(&raw, &w.lidar_stem)?;
    let v_image = stem(&sampled, &w.image_stem)?;
    let b_lidar = sparse_height_compress(&v_lidar);
    let (lidar_voxels, image_voxels) = (v_lidar.len(), v_image.len());
    drop((raw, sampled));
    let (vl, vi, scale_counts) = hvf_forward(&v_lidar, &v_image, &w.hvf)?;
    let bev_bytes = map_bytes(&b_lidar) + map_bytes(&b_image);
    t.lap("voxel_fusion", voxel_bytes(&v_lidar) + voxel_bytes(&v_image) + voxel_bytes(&vl) + voxel_bytes(&vi) + bev_bytes);
    drop((v_lidar, v_image));

    let fused = hbf_forward(&b_lidar, &b_image, &vl, &vi, &w.hbf)?;
    let fused_bytes = [&fused.lidar_compressed, &fused.image_compressed, &fused.fused, &fused.out]
        .iter()
        .map(|m| map_bytes(m))
        .sum::<usize>();
    t.lap("bev_fusion", voxel_bytes(&vl) + voxel_bytes(&vi) + bev_bytes + fused_bytes);
    let bev = fused.out;

    let q = pqg_forward(&bev, &w.pqg, &cfg.pqg())?;
    t.lap("query_generation", voxel_bytes(&vl) + voxel_bytes(&vi) + map_bytes(&bev) + map_bytes(&q.activated));

    let all: Vec<Query> = q.easy.iter().chain(&q.hard).cloned().collect();
    let detections = decode(&all, &bev, &vl, &vi, &w.decoder)?;
    t.lap("decoder", voxel_bytes(&vl) + voxel_bytes(&vi) + map_bytes(&bev));

    let passthrough = passthrough_boxes(&q.easy, &bev.frame);
    let peak_live_bytes = t.stages.iter().map(|s| s.live_bytes).max().unwrap_or(0);
    let report = RunReport {
        stages: t.stages,
        peak_live_bytes,
        points: scene.points.rows(),
        lidar_voxels,
        image_voxels,
        scale_counts,
        easy_queries: q.easy.len(),
        hard_queries: q.hard.len(),
    };
    Ok(RunOutput { detections, passthrough, easy: q.easy, hard: q.hard, report })
}
