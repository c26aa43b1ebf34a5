//! Progressive decoder: deformable BEV layers, voxel feature mixing layers
//! over both modalities, and the detection head.

use std::collections::HashMap;
use std::f64::consts::PI;

use rayon::prelude::*;

use crate::bev::FeatureMap;
use crate::error::{ensure, Result};
use crate::geometry::BevFrame;
use crate::nn::{concat_cols, sample_bilinear, sigmoid, silu, softmax_in_place, Attention, FeedForward, Linear};
use crate::pqg::Query;
use crate::rng::ParamInit;
use crate::tensor::Tensor;
use crate::voxel::{Coord, SparseVoxelSet};

pub const NUM_SAMPLES: usize = 4;
pub const BOX_PARAMS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProposalBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

/// Final detection.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: usize,
    pub score: f64,
}

impl DetectionBox {
    pub fn new(b: ProposalBox, class_id: usize, score: f64) -> Self {
        Self { center: b.center, size: b.size, yaw: b.yaw, class_id, score }
    }
}

/// Query features travelling through the decoder with their anchor cells.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    /// `(n, C)`
    pub feats: Tensor,
    pub cells: Vec<(usize, usize)>,
    pub classes: Vec<usize>,
    pub scores: Vec<f32>,
}

impl QuerySet {
    pub fn from_queries(queries: &[Query], channels: usize) -> Result<Self> {
        let rows: Vec<Vec<f32>> = queries.iter().map(|q| q.feature.clone()).collect();
        Ok(Self {
            feats: Tensor::from_rows(&rows, channels)?,
            cells: queries.iter().map(|q| (q.row, q.col)).collect(),
            classes: queries.iter().map(|q| q.class_id).collect(),
            scores: queries.iter().map(|q| q.score).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Maps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut y = a.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    y
}

/// Boxes at the query cells, unit size; used to score query placement alone.
pub fn passthrough_boxes(queries: &[Query], frame: &BevFrame) -> Vec<DetectionBox> {
    queries
        .iter()
        .map(|q| {
            let [x, y] = frame.cell_center(q.row, q.col);
            DetectionBox { center: [x, y, 0.0], size: [1.0; 3], yaw: 0.0, class_id: q.class_id, score: q.score as f64 }
        })
        .collect()
}

/// Two-layer MLP to `(dx, dy, z, log l, log w, log h, sin, cos)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl BoxHead {
    pub fn init(p: &ParamInit, channels: usize, hidden: usize) -> Self {
        Self { hidden: Linear::init(p, "hidden", hidden, channels), out: Linear::init(p, "out", BOX_PARAMS, hidden) }
    }
}

pub fn box_from_query(q: &[f32], cell: (usize, usize), frame: &BevFrame, w: &BoxHead) -> ProposalBox {
    let h: Vec<f32> = w.hidden.apply_vec(q).into_iter().map(silu).collect();
    let r: Vec<f64> = w.out.apply_vec(&h).into_iter().map(f64::from).collect();
    let [cx, cy] = frame.cell_center(cell.0, cell.1);
    ProposalBox {
        center: [cx + r[0], cy + r[1], r[2]],
        size: [r[3].exp(), r[4].exp(), r[5].exp()],
        yaw: wrap_angle(r[6].atan2(r[7])),
    }
}

/// Centers of a `g x g x g` lattice filling the box, in world coordinates.
pub fn grid_points(b: &ProposalBox, g: usize) -> Result<Vec<[f64; 3]>> {
    ensure!(g >= 2 && (g * g * g) % 4 == 0, InvalidArgument, "grid side {g} must be >= 2 with g^3 divisible by 4");
    let (s, c) = b.yaw.sin_cos();
    let frac = |i: usize| (i as f64 + 0.5) / g as f64 - 0.5;
    let mut pts = Vec::with_capacity(g * g * g);
    for i in 0..g {
        for j in 0..g {
            for k in 0..g {
                let (lx, ly, lz) = (frac(i) * b.size[0], frac(j) * b.size[1], frac(k) * b.size[2]);
                pts.push([b.center[0] + lx * c - ly * s, b.center[1] + lx * s + ly * c, b.center[2] + lz]);
            }
        }
    }
    Ok(pts)
}

const FACE_NEIGHBORS: [[i64; 3]; 7] = [[0, 0, 0], [-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

/// Mean feature of the occupied voxels among each point's cell and its six
/// face neighbors; zeros when none is occupied.
pub fn voxel_pool(v: &SparseVoxelSet, lookup: &HashMap<Coord, usize>, points: &[[f64; 3]]) -> Tensor {
    let c = v.channels();
    let mut out = Tensor::zeros(&[points.len(), c]);
    for (p, row) in points.iter().zip(out.data_mut().chunks_mut(c.max(1))) {
        let base = v.grid.cell_of(*p);
        let mut acc = vec![0f64; c];
        let mut n = 0usize;
        for d in FACE_NEIGHBORS {
            let cell = [base[0] + d[0], base[1] + d[1], base[2] + d[2]];
            if !v.grid.contains(cell) {
                continue;
            }
            if let Some(&i) = lookup.get(&[cell[0] as u32, cell[1] as u32, cell[2] as u32]) {
                for (a, &f) in acc.iter_mut().zip(v.feature(i)) {
                    *a += f as f64;
                }
                n += 1;
            }
        }
        if n > 0 {
            for (r, a) in row.iter_mut().zip(acc) {
                *r = (a / n as f64) as f32;
            }
        }
    }
    out
}

/// Query-conditioned channel and spatial mixing of lattice features.
#[derive(Clone, Debug, PartialEq)]
pub struct MixWeights {
    pub channels: usize,
    pub points: usize,
    pub offset_embed: Linear,
    /// Emits the `(C, C)` channel kernel, row-major.
    pub channel_gen: Linear,
    /// Emits the `(G, G/4)` spatial kernel, row-major.
    pub spatial_gen: Linear,
    pub down: Linear,
}

impl MixWeights {
    pub fn init(p: &ParamInit, query_dim: usize, channels: usize, points: usize) -> Self {
        let s = points / 4;
        Self {
            channels,
            points,
            offset_embed: Linear::init(p, "offset_embed", channels, 3),
            channel_gen: Linear::init(p, "channel_gen", channels * channels, query_dim),
            spatial_gen: Linear::init(p, "spatial_gen", points * s, query_dim),
            down: Linear::init(p, "down", channels, channels * s),
        }
    }
}

pub fn mmvfm_mix(q: &[f32], feats: &Tensor, offsets: &[[f64; 3]], w: &MixWeights) -> Result<Vec<f32>> {
    let (g, c) = (w.points, w.channels);
    ensure!(feats.dims() == [g, c], Shape, "grid features {:?}, expected ({g}, {c})", feats.dims());
    ensure!(offsets.len() == g, Shape, "{} offsets for {g} points", offsets.len());
    let s = g / 4;
    let ck = w.channel_gen.apply_vec(q);
    let sk = w.spatial_gen.apply_vec(q);
    let mut fg = vec![0f64; g * c];
    for (i, off) in offsets.iter().enumerate() {
        let e = w.offset_embed.apply_vec(&off.map(|v| v as f32));
        for k in 0..c {
            fg[i * c + k] = feats.data()[i * c + k] as f64 + e[k] as f64;
        }
    }
    let mut f1 = vec![0f64; g * c];
    for i in 0..g {
        for a in 0..c {
            let x = fg[i * c + a];
            if x == 0.0 {
                continue;
            }
            for b in 0..c {
                f1[i * c + b] += x * ck[a * c + b] as f64;
            }
        }
    }
    let mut f2 = vec![0f64; c * s];
    for i in 0..g {
        for ch in 0..c {
            let x = f1[i * c + ch];
            for j in 0..s {
                f2[ch * s + j] += x * sk[i * s + j] as f64;
            }
        }
    }
    let flat: Vec<f32> = f2.into_iter().map(|v| v as f32).collect();
    Ok(w.down.apply_vec(&flat))
}

/// One voxel decoding layer over both modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct MmvfmLayer {
    pub box_head: BoxHead,
    pub mix_lidar: MixWeights,
    pub mix_image: MixWeights,
    pub attn_lidar: Attention,
    pub attn_image: Attention,
    pub fuse: Linear,
    pub grid_side: usize,
}

impl MmvfmLayer {
    pub fn init(p: &ParamInit, query_dim: usize, voxel_dim: usize, hidden: usize, grid_side: usize) -> Self {
        let g = grid_side.pow(3);
        Self {
            box_head: BoxHead::init(&p.sub("box"), query_dim, hidden),
            mix_lidar: MixWeights::init(&p.sub("mix_lidar"), query_dim, voxel_dim, g),
            mix_image: MixWeights::init(&p.sub("mix_image"), query_dim, voxel_dim, g),
            attn_lidar: Attention::init(&p.sub("attn_lidar"), voxel_dim, voxel_dim, voxel_dim),
            attn_image: Attention::init(&p.sub("attn_image"), voxel_dim, voxel_dim, voxel_dim),
            fuse: Linear::init(p, "fuse", query_dim, query_dim + 2 * voxel_dim),
            grid_side,
        }
    }
}

fn mix_modality(qs: &QuerySet, boxes: &[ProposalBox], v: &SparseVoxelSet, mix: &MixWeights, g: usize) -> Result<Tensor> {
    let lookup = v.lookup();
    let rows = (0..qs.len())
        .into_par_iter()
        .map(|i| {
            let pts = grid_points(&boxes[i], g)?;
            let feats = if v.is_empty() {
                Tensor::zeros(&[pts.len(), mix.channels])
            } else {
                voxel_pool(v, &lookup, &pts)
            };
            let c = boxes[i].center;
            let offsets: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect();
            mmvfm_mix(qs.feats.row(i), &feats, &offsets, mix)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows, mix.channels)
}

pub fn mmvfm_layer(
    qs: &QuerySet,
    frame: &BevFrame,
    v_lidar: &SparseVoxelSet,
    v_image: &SparseVoxelSet,
    w: &MmvfmLayer,
) -> Result<QuerySet> {
    let boxes: Vec<ProposalBox> =
        (0..qs.len()).map(|i| box_from_query(qs.feats.row(i), qs.cells[i], frame, &w.box_head)).collect();
    let (fl, fi) = rayon::join(
        || mix_modality(qs, &boxes, v_lidar, &w.mix_lidar, w.grid_side),
        || mix_modality(qs, &boxes, v_image, &w.mix_image, w.grid_side),
    );
    let fl = w.attn_lidar.self_residual(&fl?)?;
    let fi = w.attn_image.self_residual(&fi?)?;
    let feats = w.fuse.forward(&concat_cols(&[&qs.feats, &fl, &fi])?)?;
    Ok(QuerySet { feats, ..qs.clone() })
}

/// Single-head deformable attention over the BEV map.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformableLayer {
    /// `(dy, dx)` per sample, in cells.
    pub offsets: Linear,
    pub weights: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ffn: FeedForward,
}

impl DeformableLayer {
    pub fn init(p: &ParamInit, channels: usize, hidden: usize) -> Self {
        Self {
            offsets: Linear::init(p, "offsets", 2 * NUM_SAMPLES, channels),
            weights: Linear::init(p, "weights", NUM_SAMPLES, channels),
            value: Linear::init(p, "value", channels, channels),
            out: Linear::init(p, "out", channels, channels),
            ffn: FeedForward::init(&p.sub("ffn"), channels, hidden),
        }
    }
}

/// Sample positions `(row, col)` and their softmax weights for one query.
pub fn deformable_samples(q: &[f32], cell: (usize, usize), w: &DeformableLayer) -> ([(f64, f64); NUM_SAMPLES], [f64; NUM_SAMPLES]) {
    let off = w.offsets.apply_vec(q);
    let mut logits: Vec<f64> = w.weights.apply_vec(q).into_iter().map(f64::from).collect();
    softmax_in_place(&mut logits);
    let pos = std::array::from_fn(|s| (cell.0 as f64 + off[2 * s] as f64, cell.1 as f64 + off[2 * s + 1] as f64));
    (pos, std::array::from_fn(|s| logits[s]))
}

pub fn deformable_layer(qs: &QuerySet, b: &FeatureMap, w: &DeformableLayer) -> Result<QuerySet> {
    ensure!(qs.feats.cols() == b.c(), Shape, "queries of width {} on a {}-channel map", qs.feats.cols(), b.c());
    let values = FeatureMap::new(w.value.forward(&b.data)?, b.frame)?;
    let c = b.c();
    let rows: Vec<Vec<f32>> = (0..qs.len())
        .into_par_iter()
        .map(|i| {
            let (pos, wts) = deformable_samples(qs.feats.row(i), qs.cells[i], w);
            let mut agg = vec![0f64; c];
            let mut buf = vec![0f64; c];
            for (&(r, col), &wt) in pos.iter().zip(&wts) {
                sample_bilinear(&values.data, r, col, &mut buf);
                agg.iter_mut().zip(&buf).for_each(|(a, v)| *a += wt * v);
            }
            let agg: Vec<f32> = agg.into_iter().map(|v| v as f32).collect();
            w.out.apply_vec(&agg).into_iter().zip(qs.feats.row(i)).map(|(o, &q)| o + q).collect()
        })
        .collect();
    let feats = w.ffn.forward_residual(&Tensor::from_rows(&rows, c)?)?;
    Ok(QuerySet { feats, ..qs.clone() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionHead {
    pub attn: Attention,
    pub ffn: FeedForward,
    pub cls: Linear,
    pub box_head: BoxHead,
}

impl DetectionHead {
    pub fn init(p: &ParamInit, channels: usize, hidden: usize, classes: usize) -> Self {
        Self {
            attn: Attention::init(&p.sub("attn"), channels, channels, channels),
            ffn: FeedForward::init(&p.sub("ffn"), channels, hidden),
            cls: Linear::init(p, "cls", classes, channels),
            box_head: BoxHead::init(&p.sub("box"), channels, hidden),
        }
    }
}

pub fn detection_head(qs: &QuerySet, frame: &BevFrame, w: &DetectionHead) -> Result<Vec<DetectionBox>> {
    if qs.is_empty() {
        return Ok(Vec::new());
    }
    let x = w.ffn.forward_residual(&w.attn.self_residual(&qs.feats)?)?;
    let logits = w.cls.forward(&x)?;
    Ok((0..qs.len())
        .map(|i| {
            let (mut best, mut score) = (0, f32::NEG_INFINITY);
            for (k, &l) in logits.row(i).iter().enumerate() {
                let s = sigmoid(l);
                if s > score {
                    (best, score) = (k, s);
                }
            }
            DetectionBox::new(box_from_query(x.row(i), qs.cells[i], frame, &w.box_head), best, score as f64)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderWeights {
    pub bev_layers: Vec<DeformableLayer>,
    pub voxel_layers: Vec<MmvfmLayer>,
    pub head: DetectionHead,
}

/// Widths and depths of the decoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderDims {
    pub query: usize,
    pub voxel: usize,
    pub hidden: usize,
    pub classes: usize,
    pub grid_side: usize,
    pub n_bev: usize,
    pub m_vox: usize,
}

impl DecoderWeights {
    pub fn init(p: &ParamInit, d: DecoderDims) -> Self {
        Self {
            bev_layers: (0..d.n_bev).map(|i| DeformableLayer::init(&p.sub(&format!("bev{i}")), d.query, d.hidden)).collect(),
            voxel_layers: (0..d.m_vox)
                .map(|i| MmvfmLayer::init(&p.sub(&format!("vox{i}")), d.query, d.voxel, d.hidden, d.grid_side))
                .collect(),
            head: DetectionHead::init(&p.sub("head"), d.query, d.hidden, d.classes),
        }
    }
}

/// One box per query, in query order.
pub fn decode(
    queries: &[Query],
    b: &FeatureMap,
    v_lidar: &SparseVoxelSet,
    v_image: &SparseVoxelSet,
    w: &DecoderWeights,
) -> Result<Vec<DetectionBox>> {
    let mut qs = QuerySet::from_queries(queries, b.c())?;
    for layer in &w.bev_layers {
        qs = deformable_layer(&qs, b, layer)?;
    }
    for layer in &w.voxel_layers {
        qs = mmvfm_layer(&qs, &b.frame, v_lidar, v_image, layer)?;
    }
    detection_head(&qs, &b.frame, &w.head)
}
