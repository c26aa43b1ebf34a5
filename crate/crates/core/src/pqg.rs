//! Two-stage query generation: heatmap peaks give easy queries, the easy
//! queries activate the BEV map, and a masked second heatmap gives hard ones.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bev::FeatureMap;
use crate::error::{ensure, Result};
use crate::nn::{sigmoid, silu, Attention, Conv2d, Linear, ResBlock};
use crate::rng::ParamInit;
use crate::tensor::Tensor;

/// `(K, H, W)` class scores in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub data: Tensor,
}

impl Heatmap {
    pub fn new(data: Tensor) -> Result<Self> {
        ensure!(data.dims().len() == 3, Shape, "heatmap must be (K, H, W), got {:?}", data.dims());
        Ok(Self { data })
    }

    pub fn classes(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn h(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn w(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn at(&self, k: usize, r: usize, c: usize) -> f32 {
        self.data.data()[(k * self.h() + r) * self.w() + c]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Easy,
    Hard,
}

/// A surviving heatmap cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub class_id: usize,
    pub row: usize,
    pub col: usize,
    pub score: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub row: usize,
    pub col: usize,
    pub class_id: usize,
    pub feature: Vec<f32>,
    pub stage: Stage,
    pub score: f32,
}

/// Binary `(H, W)` mask; 0 marks cells claimed by easy queries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl QueryMask {
    pub fn at(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.w + c]
    }
}

/// 3x3 conv, SiLU, 1x1 conv to `K` classes, sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapHead {
    pub conv: Conv2d,
    pub out: Linear,
}

impl HeatmapHead {
    pub fn init(p: &ParamInit, channels: usize, hidden: usize, classes: usize) -> Self {
        Self { conv: Conv2d::init(p, "conv", hidden, channels, 3), out: Linear::init(p, "out", classes, hidden) }
    }

    pub fn zero(&mut self) {
        self.conv.zero();
        self.out.zero();
    }
}

pub fn heatmap_head(b: &FeatureMap, w: &HeatmapHead) -> Result<Heatmap> {
    let mut h = w.conv.forward(&b.data, 1)?;
    h.data_mut().iter_mut().for_each(|v| *v = silu(*v));
    let logits = w.out.forward(&h)?;
    let (hh, ww, k) = (b.h(), b.w(), w.out.out_dim());
    let mut out = Tensor::zeros(&[k, hh, ww]);
    for cell in 0..hh * ww {
        for c in 0..k {
            out.data_mut()[c * hh * ww + cell] = sigmoid(logits.data()[cell * k + c]);
        }
    }
    Heatmap::new(out)
}

fn is_local_max(h: &Heatmap, k: usize, r: usize, c: usize) -> bool {
    let v = h.at(k, r, c);
    for rr in r.saturating_sub(1)..=(r + 1).min(h.h() - 1) {
        for cc in c.saturating_sub(1)..=(c + 1).min(h.w() - 1) {
            if h.at(k, rr, cc) > v {
                return false;
            }
        }
    }
    true
}

fn select(h: &Heatmap, k: usize, allowed: impl Fn(usize, usize) -> bool + Sync) -> Vec<Peak> {
    let (hh, ww) = (h.h(), h.w());
    let mut peaks: Vec<(usize, Peak)> = (0..h.classes() * hh * ww)
        .into_par_iter()
        .filter_map(|flat| {
            let (cls, r, c) = (flat / (hh * ww), flat / ww % hh, flat % ww);
            (allowed(r, c) && is_local_max(h, cls, r, c))
                .then(|| (flat, Peak { class_id: cls, row: r, col: c, score: h.at(cls, r, c) }))
        })
        .collect();
    peaks.sort_by(|a, b| match b.1.score.total_cmp(&a.1.score) {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
    peaks.truncate(k);
    peaks.into_iter().map(|(_, p)| p).collect()
}

/// Cells equal to the max of their 3x3 neighborhood in the same class, the
/// top `k` over all classes by score, ties broken by flat index.
pub fn nms_topk(h: &Heatmap, k: usize) -> Vec<Peak> {
    select(h, k, |_, _| true)
}

/// [`nms_topk`] over `M ⊙ H`, with masked-out cells never selected.
pub fn nms_topk_masked(h: &Heatmap, mask: &QueryMask, k: usize) -> Result<Vec<Peak>> {
    ensure!((mask.h, mask.w) == (h.h(), h.w()), Shape, "mask {}x{} for a {}x{} heatmap", mask.h, mask.w, h.h(), h.w());
    let mut masked = h.data.clone();
    let plane = h.h() * h.w();
    for (i, v) in masked.data_mut().iter_mut().enumerate() {
        *v *= mask.data[i % plane] as f32;
    }
    Ok(select(&Heatmap::new(masked)?, k, |r, c| mask.at(r, c) == 1))
}

/// Reads the map feature under each peak.
pub fn collect(b: &FeatureMap, peaks: &[Peak], stage: Stage) -> Result<Vec<Query>> {
    peaks
        .iter()
        .map(|p| {
            ensure!(
                p.row < b.h() && p.col < b.w(),
                OutOfRange,
                "query cell ({}, {}) outside a {}x{} map",
                p.row,
                p.col,
                b.h(),
                b.w()
            );
            Ok(Query {
                row: p.row,
                col: p.col,
                class_id: p.class_id,
                feature: b.cell(p.row, p.col).to_vec(),
                stage,
                score: p.score,
            })
        })
        .collect()
}

/// Complement of the `kernel x kernel` dilation of the easy positions.
pub fn build_mask(positions: &[(usize, usize)], h: usize, w: usize, kernel: usize) -> Result<QueryMask> {
    ensure!(kernel % 2 == 1, InvalidArgument, "mask kernel must be odd, got {kernel}");
    let r = kernel / 2;
    let mut data = vec![1u8; h * w];
    for &(pr, pc) in positions {
        ensure!(pr < h && pc < w, OutOfRange, "position ({pr}, {pc}) outside a {h}x{w} map");
        for rr in pr.saturating_sub(r)..=(pr + r).min(h - 1) {
            for cc in pc.saturating_sub(r)..=(pc + r).min(w - 1) {
                data[rr * w + cc] = 0;
            }
        }
    }
    Ok(QueryMask { h, w, data })
}

pub const POS_DIM: usize = 16;

/// Sine/cosine features of a cell position, half for the row, half for the column.
pub fn position_encoding(row: f64, col: f64) -> [f32; POS_DIM] {
    let mut out = [0f32; POS_DIM];
    let quarter = POS_DIM / 4;
    for k in 0..quarter {
        let freq = 1.0 / 100f64.powf(k as f64 / quarter as f64);
        out[2 * k] = (row * freq).sin() as f32;
        out[2 * k + 1] = (row * freq).cos() as f32;
        out[POS_DIM / 2 + 2 * k] = (col * freq).sin() as f32;
        out[POS_DIM / 2 + 2 * k + 1] = (col * freq).cos() as f32;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiaWeights {
    pub cls_embed: Linear,
    pub pos_embed: Linear,
    pub self_attn: Attention,
    pub cross_attn: Attention,
    pub block: ResBlock,
}

impl HiaWeights {
    pub fn init(p: &ParamInit, channels: usize, classes: usize) -> Self {
        Self {
            cls_embed: Linear::init(p, "cls_embed", channels, classes),
            pos_embed: Linear::init(p, "pos_embed", channels, POS_DIM),
            self_attn: Attention::init(&p.sub("self_attn"), channels, channels, channels),
            cross_attn: Attention::init(&p.sub("cross_attn"), channels, channels, channels),
            block: ResBlock::init(&p.sub("block"), channels),
        }
    }
}

/// Query embeddings: feature plus class and position embeddings.
pub fn embed_queries(queries: &[Query], w: &HiaWeights) -> Result<Tensor> {
    let classes = w.cls_embed.in_dim();
    let rows = queries
        .iter()
        .map(|q| {
            ensure!(q.class_id < classes, OutOfRange, "class {} of {classes}", q.class_id);
            let mut onehot = vec![0f32; classes];
            onehot[q.class_id] = 1.0;
            let c = w.cls_embed.apply_vec(&onehot);
            let p = w.pos_embed.apply_vec(&position_encoding(q.row as f64, q.col as f64));
            Ok(q.feature.iter().zip(c).zip(p).map(|((&f, c), p)| f + c + p).collect())
        })
        .collect::<Result<Vec<Vec<f32>>>>()?;
    Tensor::from_rows(&rows, w.cls_embed.out_dim())
}

/// BEV cells with their position embeddings, `(H*W, C)`.
pub fn embed_cells(b: &FeatureMap, w: &HiaWeights) -> Tensor {
    let mut x = b.as_rows();
    let c = b.c();
    x.data_mut().par_chunks_mut(c).enumerate().for_each(|(cell, row)| {
        let pe = w.pos_embed.apply_vec(&position_encoding((cell / b.w()) as f64, (cell % b.w()) as f64));
        row.iter_mut().zip(pe).for_each(|(r, p)| *r += p);
    });
    x
}

/// Activates the BEV map with attention from every cell to the
/// self-attended easy queries, then applies a residual conv block.
pub fn hia(queries: &[Query], b: &FeatureMap, w: &HiaWeights) -> Result<FeatureMap> {
    let mut x = b.data.clone();
    if !queries.is_empty() {
        let e = w.self_attn.self_residual(&embed_queries(queries, w)?)?;
        let act = w.cross_attn.forward(&embed_cells(b, w), &e)?;
        for (o, &a) in x.data_mut().iter_mut().zip(act.data()) {
            *o += a;
        }
    }
    FeatureMap::new(w.block.forward(&x)?, b.frame)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PqgParams {
    pub k_easy: usize,
    pub k_hard: usize,
    pub mask_kernel: usize,
}

impl Default for PqgParams {
    fn default() -> Self {
        Self { k_easy: 100, k_hard: 100, mask_kernel: 3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PqgWeights {
    pub head1: HeatmapHead,
    pub head2: HeatmapHead,
    pub hia: HiaWeights,
}

impl PqgWeights {
    pub fn init(p: &ParamInit, channels: usize, hidden: usize, classes: usize) -> Self {
        Self {
            head1: HeatmapHead::init(&p.sub("head1"), channels, hidden, classes),
            head2: HeatmapHead::init(&p.sub("head2"), channels, hidden, classes),
            hia: HiaWeights::init(&p.sub("hia"), channels, classes),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PqgOutput {
    pub easy: Vec<Query>,
    pub hard: Vec<Query>,
    pub activated: FeatureMap,
    pub heatmap: Heatmap,
    pub heatmap_hard: Heatmap,
    pub mask: QueryMask,
}

pub fn pqg_forward(b: &FeatureMap, w: &PqgWeights, params: &PqgParams) -> Result<PqgOutput> {
    ensure!(params.k_easy >= 1 && params.k_hard >= 1, InvalidArgument, "query counts must be positive");
    let heatmap = heatmap_head(b, &w.head1)?;
    let easy = collect(b, &nms_topk(&heatmap, params.k_easy), Stage::Easy)?;
    let pos: Vec<(usize, usize)> = easy.iter().map(|q| (q.row, q.col)).collect();
    let mask = build_mask(&pos, b.h(), b.w(), params.mask_kernel)?;
    let activated = hia(&easy, b, &w.hia)?;
    let heatmap_hard = heatmap_head(&activated, &w.head2)?;
    let hard = collect(&activated, &nms_topk_masked(&heatmap_hard, &mask, params.k_hard)?, Stage::Hard)?;
    Ok(PqgOutput { easy, hard, activated, heatmap, heatmap_hard, mask })
}
