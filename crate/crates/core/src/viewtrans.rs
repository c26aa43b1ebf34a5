//! Camera-to-3D transforms: the image encoder surrogate, projection sampling,
//! semantic-aware sparse voxel selection, farthest point sampling, and the
//! lift-splat BEV projection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bev::FeatureMap;
use crate::error::{ensure, Result};
use crate::geometry::{CameraModel, GridSpec};
use crate::nn::{sample_bilinear, sigmoid, silu, softmax_in_place, Conv2d, Linear};
use crate::rng::ParamInit;
use crate::tensor::Tensor;
use crate::voxel::{Coord, SparseVoxelSet};

/// Per-camera image features with depth distribution and semantic score.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatureSet {
    /// `(h, w, C)`
    pub feats: Tensor,
    /// `(h, w, D)`, each pixel a probability distribution over depth bins.
    pub depth: Tensor,
    /// `(h, w, 1)` in `[0, 1]`.
    pub semantic: Tensor,
}

impl ImageFeatureSet {
    pub fn h(&self) -> usize {
        self.feats.dims()[0]
    }

    pub fn w(&self) -> usize {
        self.feats.dims()[1]
    }
}

/// Uniform depth bins over `[d_min, d_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthBinSpec {
    pub d_min: f64,
    pub d_max: f64,
    pub count: usize,
}

impl DepthBinSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.d_min > 0.0, InvalidArgument, "d_min must be positive");
        ensure!(self.d_max > self.d_min, InvalidArgument, "d_max must exceed d_min");
        ensure!(self.count >= 2, InvalidArgument, "need at least two depth bins");
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.d_max - self.d_min) / self.count as f64
    }

    pub fn bin_of(&self, depth: f64) -> Option<usize> {
        if depth < self.d_min || depth >= self.d_max {
            return None;
        }
        Some((((depth - self.d_min) / self.width()) as usize).min(self.count - 1))
    }

    pub fn center(&self, k: usize) -> f64 {
        self.d_min + (k as f64 + 0.5) * self.width()
    }
}

/// Two strided 3x3 convolutions with SiLU, then 1x1 depth and semantic heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoderWeights {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub depth_head: Linear,
    pub semantic_head: Linear,
}

impl ImageEncoderWeights {
    pub fn init(p: &ParamInit, channels: usize, depth_bins: usize) -> Self {
        Self {
            conv1: Conv2d::init(p, "conv1", channels, 3, 3),
            conv2: Conv2d::init(p, "conv2", channels, channels, 3),
            depth_head: Linear::init(p, "depth_head", depth_bins, channels),
            semantic_head: Linear::init(p, "semantic_head", 1, channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv2.out_dim()
    }
}

pub fn encode_image(image: &Tensor, w: &ImageEncoderWeights) -> Result<ImageFeatureSet> {
    ensure!(
        image.dims().len() == 3 && image.dims()[2] == 3,
        Shape,
        "image must be (h, w, 3), got {:?}",
        image.dims()
    );
    ensure!(image.is_finite(), InvalidArgument, "image contains non-finite values");
    let mut f = w.conv1.forward(image, 2)?;
    f.data_mut().iter_mut().for_each(|v| *v = silu(*v));
    let mut feats = w.conv2.forward(&f, 2)?;
    feats.data_mut().iter_mut().for_each(|v| *v = silu(*v));

    let mut depth = w.depth_head.forward(&feats)?;
    let d = depth.cols();
    depth.data_mut().par_chunks_mut(d).for_each(|px| {
        let mut l: Vec<f64> = px.iter().map(|&v| v as f64).collect();
        softmax_in_place(&mut l);
        for (o, v) in px.iter_mut().zip(l) {
            *o = v as f32;
        }
    });
    let mut semantic = w.semantic_head.forward(&feats)?;
    semantic.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
    Ok(ImageFeatureSet { feats, depth, semantic })
}

/// Continuous position in an `(h, w)` map of image pixel `(u, v)`, or `None`
/// when the pixel lies outside the image.
fn map_position(cam: &CameraModel, u: f64, v: f64, h: usize, w: usize) -> Option<(f64, f64)> {
    let [ih, iw] = cam.image_size;
    if !(0.0..iw as f64).contains(&u) || !(0.0..ih as f64).contains(&v) {
        return None;
    }
    Some((v * h as f64 / ih as f64 - 0.5, u * w as f64 / iw as f64 - 0.5))
}

/// Projects world points into `map` and samples it bilinearly.
///
/// Points behind the camera or outside the image are invalid and get zeros.
pub fn project_and_sample(centers: &[[f64; 3]], camera: &CameraModel, map: &Tensor) -> Result<(Tensor, Vec<bool>)> {
    ensure!(map.dims().len() == 3, Shape, "sample map must be (h, w, K), got {:?}", map.dims());
    let (h, w, k) = (map.dims()[0], map.dims()[1], map.dims()[2]);
    let mut out = Tensor::zeros(&[centers.len(), k]);
    let mut valid = vec![false; centers.len()];
    let mut buf = vec![0.0; k];
    for (i, &p) in centers.iter().enumerate() {
        let Some((u, v, _)) = camera.project(p) else { continue };
        let Some((my, mx)) = map_position(camera, u, v, h, w) else { continue };
        sample_bilinear(map, my, mx, &mut buf);
        for (o, &b) in out.row_mut(i).iter_mut().zip(&buf) {
            *o = b as f32;
        }
        valid[i] = true;
    }
    Ok((out, valid))
}

/// Thresholds and cap for semantic-aware voxel selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafsParams {
    pub depth_threshold: f32,
    pub semantic_threshold: f32,
    pub max_voxels: usize,
}

impl Default for SafsParams {
    fn default() -> Self {
        Self { depth_threshold: 0.01, semantic_threshold: 0.25, max_voxels: 18000 }
    }
}

/// Scores of one voxel against its best camera.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelScore {
    pub camera: usize,
    pub semantic: f32,
    pub depth: f32,
    pub feature: Vec<f32>,
}

/// Scores a world point against every camera: the camera with the highest
/// sampled semantic score wins (lowest index on ties); the depth score is the
/// probability of the bin holding the point's camera depth.
pub fn score_point(
    p: [f64; 3],
    images: &[ImageFeatureSet],
    cameras: &[CameraModel],
    bins: &DepthBinSpec,
) -> Option<VoxelScore> {
    let mut best: Option<(usize, f32, f64, f64, f64)> = None;
    let mut sem = [0.0f64];
    for (ci, (img, cam)) in images.iter().zip(cameras).enumerate() {
        let Some((u, v, depth)) = cam.project(p) else { continue };
        let Some((my, mx)) = map_position(cam, u, v, img.h(), img.w()) else { continue };
        sample_bilinear(&img.semantic, my, mx, &mut sem);
        let s = sem[0] as f32;
        if best.is_none_or(|b| s > b.1) {
            best = Some((ci, s, my, mx, depth));
        }
    }
    let (ci, semantic, my, mx, depth) = best?;
    let img = &images[ci];
    let depth_score = match bins.bin_of(depth) {
        Some(k) => {
            let mut d = vec![0.0; img.depth.cols()];
            sample_bilinear(&img.depth, my, mx, &mut d);
            d[k] as f32
        }
        None => 0.0,
    };
    let mut f = vec![0.0; img.feats.cols()];
    sample_bilinear(&img.feats, my, mx, &mut f);
    Some(VoxelScore { camera: ci, semantic, depth: depth_score, feature: f.into_iter().map(|v| v as f32).collect() })
}

/// Selects image voxels whose semantic and depth scores both exceed their
/// thresholds, caps the count with farthest point sampling, and assigns each
/// the sampled image feature scaled by its depth score.
pub fn safs_select(
    grid: &GridSpec,
    images: &[ImageFeatureSet],
    cameras: &[CameraModel],
    bins: &DepthBinSpec,
    params: &SafsParams,
) -> Result<SparseVoxelSet> {
    grid.validate()?;
    bins.validate()?;
    ensure!(images.len() == cameras.len(), Shape, "{} images for {} cameras", images.len(), cameras.len());
    ensure!(
        (0.0..=1.0).contains(&params.depth_threshold) && (0.0..=1.0).contains(&params.semantic_threshold),
        InvalidArgument,
        "SAFS thresholds must lie in [0, 1]"
    );
    let channels = images.first().map(|i| i.feats.cols()).unwrap_or(0);
    let [nx, ny, nz] = grid.extents;
    let coords: Vec<Coord> = (0..nx)
        .flat_map(|x| (0..ny).flat_map(move |y| (0..nz).map(move |z| [x, y, z])))
        .collect();
    let picked: Vec<(Coord, Vec<f32>)> = coords
        .par_iter()
        .filter_map(|&c| {
            let s = score_point(grid.center(c), images, cameras, bins)?;
            (s.semantic > params.semantic_threshold && s.depth > params.depth_threshold)
                .then(|| (c, s.feature.iter().map(|&f| f * s.depth).collect()))
        })
        .collect();
    let keep: Vec<usize> = if picked.len() > params.max_voxels {
        let centers: Vec<[f64; 3]> = picked.iter().map(|(c, _)| grid.center(*c)).collect();
        let mut idx = fps(&centers, params.max_voxels)?;
        idx.sort_unstable();
        idx
    } else {
        (0..picked.len()).collect()
    };
    let mut out_coords = Vec::with_capacity(keep.len());
    let mut data = Vec::with_capacity(keep.len() * channels);
    for i in keep {
        out_coords.push(picked[i].0);
        data.extend_from_slice(&picked[i].1);
    }
    let feats = Tensor::new(vec![out_coords.len(), channels], data)?;
    Ok(SparseVoxelSet { coords: out_coords, feats, grid: *grid })
}

/// Greedy farthest point sampling seeded at index 0.
///
/// Returns `target` indices in selection order; ties pick the lowest index.
pub fn fps(points: &[[f64; 3]], target: usize) -> Result<Vec<usize>> {
    ensure!(
        target <= points.len(),
        InvalidArgument,
        "cannot sample {target} of {} points",
        points.len()
    );
    if target == 0 {
        return Ok(Vec::new());
    }
    let d2 = |a: &[f64; 3], b: &[f64; 3]| {
        let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
        dx * dx + dy * dy + dz * dz
    };
    let mut min_d = vec![f64::INFINITY; points.len()];
    let mut chosen = Vec::with_capacity(target);
    let mut last = 0;
    chosen.push(0);
    while chosen.len() < target {
        let lp = points[last];
        let (best, _) = min_d
            .par_iter_mut()
            .zip(points.par_iter())
            .enumerate()
            .map(|(i, (m, p))| {
                *m = m.min(d2(p, &lp));
                (i, *m)
            })
            .reduce(|| (usize::MAX, f64::NEG_INFINITY), |a, b| {
                if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
                    b
                } else {
                    a
                }
            });
        chosen.push(best);
        last = best;
    }
    Ok(chosen)
}

/// Lifts every pixel along its depth distribution and sum-pools the
/// resulting frustum points into the BEV cells of `bev`.
pub fn lss_splat(
    images: &[ImageFeatureSet],
    cameras: &[CameraModel],
    bins: &DepthBinSpec,
    bev: &GridSpec,
    channels: usize,
) -> Result<FeatureMap> {
    bins.validate()?;
    bev.validate()?;
    ensure!(images.len() == cameras.len(), Shape, "{} images for {} cameras", images.len(), cameras.len());
    let (h, w) = (bev.extents[1] as usize, bev.extents[0] as usize);
    let mut acc = vec![0f64; h * w * channels];
    for (img, cam) in images.iter().zip(cameras) {
        ensure!(img.feats.cols() == channels, Shape, "image features have {} channels, expected {channels}", img.feats.cols());
        ensure!(img.depth.cols() == bins.count, Shape, "depth map has {} bins, expected {}", img.depth.cols(), bins.count);
        let [ih, iw] = cam.image_size;
        let (fh, fw) = (img.h(), img.w());
        for r in 0..fh {
            for c in 0..fw {
                let u = (c as f64 + 0.5) * iw as f64 / fw as f64;
                let v = (r as f64 + 0.5) * ih as f64 / fh as f64;
                let feat = &img.feats.data()[(r * fw + c) * channels..][..channels];
                let prob = &img.depth.data()[(r * fw + c) * bins.count..][..bins.count];
                for (k, &pk) in prob.iter().enumerate() {
                    let p = cam.unproject(u, v, bins.center(k));
                    let Some(cell) = bev.coord_of(p) else { continue };
                    let base = (cell[1] as usize * w + cell[0] as usize) * channels;
                    for (a, &f) in acc[base..base + channels].iter_mut().zip(feat) {
                        *a += f as f64 * pk as f64;
                    }
                }
            }
        }
    }
    let data = Tensor::new(vec![h, w, channels], acc.into_iter().map(|v| v as f32).collect())?;
    FeatureMap::new(data, bev.bev_frame())
}
