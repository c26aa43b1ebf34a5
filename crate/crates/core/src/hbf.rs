//! BEV-domain fusion: sparse height compression, four-direction scan blocks
//! per modality, the joint-parameter cross-modal block, and the BEV backbone.

use rayon::prelude::*;

use crate::bev::FeatureMap;
use crate::curve::{cross_merge_2d, scan_orders_2d, ScanSet2D};
use crate::error::{ensure, Result};
use crate::nn::{concat_cols, layer_norm, silu, Linear, Norm, ResBlock, LN_EPS};
use crate::rng::ParamInit;
use crate::ssm::{init_a, init_dt_bias, selective_scan_chunked, split_scan_params, ScanParams, DEFAULT_CHUNK};
use crate::tensor::Tensor;
use crate::voxel::SparseVoxelSet;

/// Channelwise max over the occupied voxels of each `(x, y)` pillar.
pub fn sparse_height_compress(v: &SparseVoxelSet) -> FeatureMap {
    let mut map = FeatureMap::for_grid(&v.grid, v.channels());
    let mut seen = vec![false; map.h() * map.w()];
    let w = map.w();
    for (i, c) in v.coords.iter().enumerate() {
        let (r, col) = (c[1] as usize, c[0] as usize);
        let cell = map.cell_mut(r, col);
        if std::mem::replace(&mut seen[r * w + col], true) {
            for (m, &f) in cell.iter_mut().zip(v.feature(i)) {
                *m = m.max(f);
            }
        } else {
            cell.copy_from_slice(v.feature(i));
        }
    }
    map
}

/// Inference-mode batch norm with its running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self { gamma: vec![1.0; channels], beta: vec![0.0; channels], mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    /// The equivalent per-channel `(scale, shift)`.
    pub fn folded(&self) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> =
            self.gamma.iter().zip(&self.var).map(|(&g, &v)| g as f64 / (v as f64 + LN_EPS).sqrt()).collect();
        let shift = self.beta.iter().zip(&self.mean).zip(&scale).map(|((&b, &m), &s)| b as f64 - m as f64 * s).collect();
        (scale, shift)
    }
}

/// Scan weights of one direction.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionWeights {
    pub a: Tensor,
    pub dt_bias: Vec<f32>,
    pub out_norm: Norm,
}

impl DirectionWeights {
    fn init(p: &ParamInit, channels: usize, d_state: usize) -> Self {
        Self { a: init_a(channels, d_state), dt_bias: init_dt_bias(p, "dt_bias", channels), out_norm: Norm::new(channels) }
    }
}

fn init_dirs(p: &ParamInit, channels: usize, d_state: usize) -> [DirectionWeights; 4] {
    std::array::from_fn(|d| DirectionWeights::init(&p.sub(&format!("dir{d}")), channels, d_state))
}

/// Four-direction scan of `z` (cells in row-major order); each direction
/// uses its own parameters, given in that direction's sequence order. The
/// normalized outputs are summed back onto the map.
pub fn ss2d(z: &Tensor, scans: &ScanSet2D, dirs: &[DirectionWeights; 4], params: &[ScanParams; 4]) -> Result<Tensor> {
    let outs: Vec<Tensor> = (0..4)
        .into_par_iter()
        .map(|d| {
            let seq = z.gather_rows(&scans.orders[d]);
            let y = selective_scan_chunked(&seq, &dirs[d].a, &params[d], DEFAULT_CHUNK)?;
            Ok(layer_norm(&y, &dirs[d].out_norm))
        })
        .collect::<Result<_>>()?;
    let outs: [Tensor; 4] = outs.try_into().expect("four directions");
    let merged = cross_merge_2d(&outs, scans)?;
    Ok(Tensor::new(vec![scans.h * scans.w, z.cols()], merged.into_data())?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IbMambaWeights {
    pub channels: usize,
    pub d_state: usize,
    pub norm: Norm,
    pub in_proj: Linear,
    /// Per direction, `[B | C | Δ]` from the projected input.
    pub param_gen: [Linear; 4],
    pub dirs: [DirectionWeights; 4],
    pub y_gate: Linear,
    pub out_proj: Linear,
}

impl IbMambaWeights {
    pub fn init(p: &ParamInit, channels: usize, d_state: usize) -> Self {
        Self {
            channels,
            d_state,
            norm: Norm::new(channels),
            in_proj: Linear::init(p, "in_proj", channels, channels),
            param_gen: std::array::from_fn(|d| Linear::init(p, &format!("param_gen{d}"), 2 * d_state + channels, channels)),
            dirs: init_dirs(p, channels, d_state),
            y_gate: Linear::init(p, "y_gate", channels, channels),
            out_proj: Linear::init(p, "out_proj", channels, channels),
        }
    }

    pub fn make_identity(&mut self) {
        self.out_proj.zero();
    }
}

fn check_map(b: &FeatureMap, channels: usize) -> Result<()> {
    ensure!(b.c() == channels, Shape, "block of width {channels} got a map with {} channels", b.c());
    ensure!(b.data.is_finite(), InvalidArgument, "feature map contains non-finite values");
    Ok(())
}

fn add_into(out: &mut Tensor, x: &Tensor) {
    for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
        *o += v;
    }
}

pub fn ib_mamba(b: &FeatureMap, w: &IbMambaWeights) -> Result<FeatureMap> {
    check_map(b, w.channels)?;
    let scans = scan_orders_2d(b.h(), b.w())?;
    let x = b.as_rows();
    let u = layer_norm(&x, &w.norm);
    let z = w.in_proj.forward(&u)?;
    let params: Vec<ScanParams> = (0..4)
        .map(|d| {
            let raw = w.param_gen[d].forward(&z.gather_rows(&scans.orders[d]))?;
            split_scan_params(&raw, w.d_state, w.channels, &w.dirs[d].dt_bias)
        })
        .collect::<Result<_>>()?;
    let params: [ScanParams; 4] = params.try_into().expect("four directions");
    let mut y = ss2d(&z, &scans, &w.dirs, &params)?;
    let gate = w.y_gate.forward(&u)?;
    for (v, &g) in y.data_mut().iter_mut().zip(gate.data()) {
        *v *= silu(g);
    }
    let mut out = w.out_proj.forward(&y)?;
    add_into(&mut out, &x);
    b.from_rows(out)
}

/// Scan weights of one modality inside the cross-modal block.
#[derive(Clone, Debug, PartialEq)]
pub struct CbBranch {
    pub norm: Norm,
    pub in_proj: Linear,
    pub dirs: [DirectionWeights; 4],
    pub out_proj: Linear,
}

impl CbBranch {
    fn init(p: &ParamInit, channels: usize, d_state: usize) -> Self {
        Self {
            norm: Norm::new(channels),
            in_proj: Linear::init(p, "in_proj", channels, channels),
            dirs: init_dirs(p, channels, d_state),
            out_proj: Linear::init(p, "out_proj", channels, channels),
        }
    }
}

/// Cross-modal block: a shared parameter generator `T` over both maps
/// drives a four-direction scan per modality, and a gate from `T` mixes them.
#[derive(Clone, Debug, PartialEq)]
pub struct CbMambaWeights {
    pub channels: usize,
    pub d_state: usize,
    pub conv1: Linear,
    pub bn: BatchNorm,
    /// Emits the split layout of [`cb_param_width`].
    pub conv2: Linear,
    pub gate: Linear,
    pub image: CbBranch,
    pub lidar: CbBranch,
}

/// Width of `T`: per modality, four `B`, four `C`, then four `Δ` slices.
pub fn cb_param_width(channels: usize, d_state: usize) -> usize {
    2 * 4 * (2 * d_state + channels)
}

impl CbMambaWeights {
    pub fn init(p: &ParamInit, channels: usize, d_state: usize, hidden: usize) -> Self {
        let t = cb_param_width(channels, d_state);
        Self {
            channels,
            d_state,
            conv1: Linear::init(p, "conv1", hidden, 2 * channels),
            bn: BatchNorm::new(hidden),
            conv2: Linear::init(p, "conv2", t, hidden),
            gate: Linear::init(p, "gate", channels, t),
            image: CbBranch::init(&p.sub("image"), channels, d_state),
            lidar: CbBranch::init(&p.sub("lidar"), channels, d_state),
        }
    }

    pub fn make_identity(&mut self) {
        self.image.out_proj.zero();
        self.lidar.out_proj.zero();
    }
}

/// `T` for every cell, row-major.
pub fn cb_params(b_img: &FeatureMap, b_lidar: &FeatureMap, w: &CbMambaWeights) -> Result<Tensor> {
    let f = concat_cols(&[&b_img.as_rows(), &b_lidar.as_rows()])?;
    let mut h = w.conv1.forward(&f)?;
    let (scale, shift) = w.bn.folded();
    let hc = h.cols();
    h.data_mut().par_chunks_mut(hc.max(1)).for_each(|row| {
        for (k, v) in row.iter_mut().enumerate() {
            *v = silu((*v as f64 * scale[k] + shift[k]) as f32);
        }
    });
    w.conv2.forward(&h)
}

/// `(Y_I, Y_L)` from `T`; `Y_L = 1 - Y_I`.
pub fn cb_gates(t: &Tensor, w: &CbMambaWeights) -> Result<(Tensor, Tensor)> {
    let mut yi = w.gate.forward(t)?;
    yi.data_mut().iter_mut().for_each(|v| *v = silu(*v));
    let mut yl = yi.clone();
    yl.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
    Ok((yi, yl))
}

/// Extracts one modality's direction-`d` scan parameters from `T`, in that
/// direction's sequence order.
fn cb_direction_params(t: &Tensor, modality: usize, d: usize, order: &[usize], w: &CbMambaWeights, dt_bias: &[f32]) -> Result<ScanParams> {
    let (n, c) = (w.d_state, w.channels);
    let base = modality * 4 * (2 * n + c);
    let width = 2 * n + c;
    let mut raw = Vec::with_capacity(order.len() * width);
    for &cell in order {
        let row = t.row(cell);
        raw.extend_from_slice(&row[base + d * n..][..n]);
        raw.extend_from_slice(&row[base + 4 * n + d * n..][..n]);
        raw.extend_from_slice(&row[base + 8 * n + d * c..][..c]);
    }
    split_scan_params(&Tensor::new(vec![order.len(), width], raw)?, n, c, dt_bias)
}

fn cb_branch(x: &Tensor, t: &Tensor, modality: usize, scans: &ScanSet2D, w: &CbMambaWeights) -> Result<Tensor> {
    let br = if modality == 0 { &w.image } else { &w.lidar };
    let z = br.in_proj.forward(&layer_norm(x, &br.norm))?;
    let params: Vec<ScanParams> = (0..4)
        .map(|d| cb_direction_params(t, modality, d, &scans.orders[d], w, &br.dirs[d].dt_bias))
        .collect::<Result<_>>()?;
    let params: [ScanParams; 4] = params.try_into().expect("four directions");
    br.out_proj.forward(&ss2d(&z, scans, &br.dirs, &params)?)
}

/// `Y_I ⊙ S_I + Y_L ⊙ S_L + (b_img + b_lidar) / 2`.
pub fn cb_mamba(b_img: &FeatureMap, b_lidar: &FeatureMap, w: &CbMambaWeights) -> Result<FeatureMap> {
    check_map(b_img, w.channels)?;
    check_map(b_lidar, w.channels)?;
    ensure!(b_img.same_footprint(b_lidar), Shape, "cross-modal inputs differ in size");
    ensure!(
        w.conv2.out_dim() == cb_param_width(w.channels, w.d_state),
        Shape,
        "parameter generator width {} does not cover the split",
        w.conv2.out_dim()
    );
    let scans = scan_orders_2d(b_img.h(), b_img.w())?;
    let t = cb_params(b_img, b_lidar, w)?;
    let (yi, yl) = cb_gates(&t, w)?;
    let (xi, xl) = (b_img.as_rows(), b_lidar.as_rows());
    let (si, sl) = rayon::join(|| cb_branch(&xi, &t, 0, &scans, w), || cb_branch(&xl, &t, 1, &scans, w));
    let (si, sl) = (si?, sl?);
    let mut out = Tensor::zeros(xi.dims());
    for (k, o) in out.data_mut().iter_mut().enumerate() {
        *o = yi.data()[k] * si.data()[k] + yl.data()[k] * sl.data()[k] + 0.5 * (xi.data()[k] + xl.data()[k]);
    }
    b_img.from_rows(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BevBackbone {
    pub blocks: [ResBlock; 2],
}

impl BevBackbone {
    pub fn init(p: &ParamInit, channels: usize) -> Self {
        Self { blocks: std::array::from_fn(|i| ResBlock::init(&p.sub(&format!("block{i}")), channels)) }
    }

    pub fn make_identity(&mut self) {
        self.blocks.iter_mut().for_each(ResBlock::make_identity);
    }
}

pub fn bev_backbone(b: &FeatureMap, w: &BevBackbone) -> Result<FeatureMap> {
    let mut x = b.data.clone();
    for blk in &w.blocks {
        x = blk.forward(&x)?;
    }
    FeatureMap::new(x, b.frame)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HbfWeights {
    /// `[B_L | B_L']` to the common width.
    pub proj_lidar: Linear,
    /// `[B_I | B_I']` to the common width.
    pub proj_image: Linear,
    pub ib_lidar: IbMambaWeights,
    pub ib_image: IbMambaWeights,
    pub cb: CbMambaWeights,
    pub backbone: BevBackbone,
}

/// Channel widths feeding the BEV fusion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HbfDims {
    pub lidar_bev: usize,
    pub image_bev: usize,
    pub voxel: usize,
    pub bev: usize,
    pub d_state: usize,
    pub cb_hidden: usize,
}

impl HbfWeights {
    pub fn init(p: &ParamInit, d: HbfDims) -> Self {
        Self {
            proj_lidar: Linear::init(p, "proj_lidar", d.bev, d.lidar_bev + d.voxel),
            proj_image: Linear::init(p, "proj_image", d.bev, d.image_bev + d.voxel),
            ib_lidar: IbMambaWeights::init(&p.sub("ib_lidar"), d.bev, d.d_state),
            ib_image: IbMambaWeights::init(&p.sub("ib_image"), d.bev, d.d_state),
            cb: CbMambaWeights::init(&p.sub("cb"), d.bev, d.d_state, d.cb_hidden),
            backbone: BevBackbone::init(&p.sub("backbone"), d.bev),
        }
    }

    /// Leaves only the projections and the residual paths active.
    pub fn make_identity(&mut self) {
        self.ib_lidar.make_identity();
        self.ib_image.make_identity();
        self.cb.make_identity();
        self.backbone.make_identity();
    }
}

/// Intermediate BEV maps of the fusion stage.
#[derive(Clone, Debug, PartialEq)]
pub struct HbfOutput {
    pub lidar_compressed: FeatureMap,
    pub image_compressed: FeatureMap,
    pub fused: FeatureMap,
    pub out: FeatureMap,
}

fn project(parts: [&FeatureMap; 2], proj: &Linear) -> Result<FeatureMap> {
    ensure!(parts[0].same_footprint(parts[1]), Shape, "BEV inputs differ in size");
    let rows = concat_cols(&[&parts[0].as_rows(), &parts[1].as_rows()])?;
    parts[0].from_rows(proj.forward(&rows)?)
}

pub fn hbf_forward(
    b_lidar: &FeatureMap,
    b_image: &FeatureMap,
    v_lidar: &SparseVoxelSet,
    v_image: &SparseVoxelSet,
    w: &HbfWeights,
) -> Result<HbfOutput> {
    let lc = sparse_height_compress(v_lidar);
    let ic = sparse_height_compress(v_image);
    let (l, i) = rayon::join(
        || project([b_lidar, &lc], &w.proj_lidar).and_then(|m| ib_mamba(&m, &w.ib_lidar)),
        || project([b_image, &ic], &w.proj_image).and_then(|m| ib_mamba(&m, &w.ib_image)),
    );
    let fused = cb_mamba(&i?, &l?, &w.cb)?;
    let out = bev_backbone(&fused, &w.backbone)?;
    Ok(HbfOutput { lidar_compressed: lc, image_compressed: ic, fused, out })
}
