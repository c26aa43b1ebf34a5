//! Voxel-domain fusion: per-modality Hilbert-ordered scans, cross-modal scans
//! over a merged sequence, and a three-scale sparse U-shape.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::curve::{bits_for, hilbert_index, hilbert_sort};
use crate::error::{ensure, Result};
use crate::nn::silu;
use crate::rng::ParamInit;
use crate::ssm::{bidirectional_block, SsmBlockWeights};
use crate::tensor::Tensor;
use crate::voxel::{Coord, SparseVoxelSet};

pub const NUM_SCALES: usize = 3;
pub const STRIDES: [u32; NUM_SCALES] = [1, 2, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Lidar,
    Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MergedElement {
    pub tag: Modality,
    /// Row of the element in its source set.
    pub index: usize,
    /// LiDAR `z` doubled; image coordinates as given.
    pub coord: Coord,
}

/// LiDAR and image voxels interleaved along one Hilbert curve.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedSequence {
    pub elements: Vec<MergedElement>,
    /// `(n, C)` in sequence order.
    pub feats: Tensor,
    pub lidar: SparseVoxelSet,
    pub image: SparseVoxelSet,
}

/// Runs a block over `v` in Hilbert order and writes the results back to
/// their original rows.
pub fn iv_mamba(v: &SparseVoxelSet, w: &SsmBlockWeights) -> Result<SparseVoxelSet> {
    let order = hilbert_sort(v)?;
    let seq = v.feats.gather_rows(&order.permutation);
    let out = bidirectional_block(&seq, w)?;
    v.with_feats(scatter_rows(&out, &order.permutation))
}

fn scatter_rows(seq: &Tensor, perm: &[usize]) -> Tensor {
    let c = seq.cols();
    let mut out = Tensor::zeros(&[perm.len(), c]);
    for (pos, &row) in perm.iter().enumerate() {
        out.row_mut(row).copy_from_slice(seq.row(pos));
    }
    out
}

pub fn cv_merge(lidar: &SparseVoxelSet, image: &SparseVoxelSet) -> Result<MergedSequence> {
    lidar.grid.check_image_grid(&image.grid)?;
    ensure!(
        lidar.is_empty() || image.is_empty() || lidar.channels() == image.channels(),
        Shape,
        "cannot merge {} LiDAR channels with {} image channels",
        lidar.channels(),
        image.channels()
    );
    let bits = bits_for(*image.grid.extents.iter().max().unwrap());
    let lifted = lidar.coords.iter().enumerate().map(|(i, c)| MergedElement {
        tag: Modality::Lidar,
        index: i,
        coord: [c[0], c[1], 2 * c[2]],
    });
    let native = image.coords.iter().enumerate().map(|(i, &c)| MergedElement { tag: Modality::Image, index: i, coord: c });
    let mut keyed = lifted
        .chain(native)
        .map(|e| Ok((hilbert_index(e.coord[0], e.coord[1], e.coord[2], bits)?, e)))
        .collect::<Result<Vec<_>>>()?;
    keyed.sort_by_key(|(k, e)| (*k, e.tag, e.index));
    let elements: Vec<MergedElement> = keyed.into_iter().map(|(_, e)| e).collect();
    let channels = if lidar.is_empty() { image.channels() } else { lidar.channels() };
    let mut data = Vec::with_capacity(elements.len() * channels);
    for e in &elements {
        data.extend_from_slice(match e.tag {
            Modality::Lidar => lidar.feature(e.index),
            Modality::Image => image.feature(e.index),
        });
    }
    let feats = Tensor::new(vec![elements.len(), channels], data)?;
    Ok(MergedSequence { elements, feats, lidar: lidar.clone(), image: image.clone() })
}

/// Routes each element back to its branch and row.
pub fn cv_split(seq: &MergedSequence) -> Result<(SparseVoxelSet, SparseVoxelSet)> {
    let c = seq.feats.cols();
    let mut lf = Tensor::zeros(&[seq.lidar.len(), c]);
    let mut imf = Tensor::zeros(&[seq.image.len(), c]);
    for (pos, e) in seq.elements.iter().enumerate() {
        let dst = match e.tag {
            Modality::Lidar => {
                debug_assert_eq!(seq.lidar.coords[e.index], [e.coord[0], e.coord[1], e.coord[2] / 2]);
                lf.row_mut(e.index)
            }
            Modality::Image => imf.row_mut(e.index),
        };
        dst.copy_from_slice(seq.feats.row(pos));
    }
    Ok((seq.lidar.with_feats(lf)?, seq.image.with_feats(imf)?))
}

pub fn cv_mamba(seq: &MergedSequence, w: &SsmBlockWeights) -> Result<MergedSequence> {
    Ok(MergedSequence { feats: bidirectional_block(&seq.feats, w)?, ..seq.clone() })
}

/// Stride-2 sparse 3x3x3 convolution, kernel laid out `(3, 3, 3, out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDown {
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

/// Transposed stride-2 convolution, kernel laid out `(2, 2, 2, out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseUp {
    pub weight: Tensor,
}

impl SparseDown {
    pub fn init(p: &ParamInit, name: &str, out_dim: usize, in_dim: usize) -> Self {
        Self { weight: p.tensor(&format!("{name}.weight"), &[3, 3, 3, out_dim, in_dim]), bias: vec![0.0; out_dim] }
    }

    fn dims(&self) -> (usize, usize) {
        (self.weight.dims()[3], self.weight.dims()[4])
    }
}

impl SparseUp {
    pub fn init(p: &ParamInit, name: &str, out_dim: usize, in_dim: usize) -> Self {
        Self { weight: p.tensor(&format!("{name}.weight"), &[2, 2, 2, out_dim, in_dim]) }
    }

    pub fn zero(&mut self) {
        self.weight.data_mut().fill(0.0);
    }
}

fn accumulate(acc: &mut [f64], w: &[f32], f: &[f32]) {
    let cin = f.len();
    for (o, a) in acc.iter_mut().enumerate() {
        *a += w[o * cin..(o + 1) * cin].iter().zip(f).map(|(&k, &x)| k as f64 * x as f64).sum::<f64>();
    }
}

/// Output voxels are the distinct `floor(coord / 2)`; each gathers the 3x3x3
/// input neighborhood around `2 * out` and applies SiLU.
pub fn sparse_down(v: &SparseVoxelSet, conv: &SparseDown) -> Result<SparseVoxelSet> {
    let (cout, cin) = conv.dims();
    ensure!(v.is_empty() || v.channels() == cin, Shape, "kernel expects {cin} channels, got {}", v.channels());
    let grid = v.grid.downsampled();
    let coords: Vec<Coord> =
        v.coords.iter().map(|c| c.map(|x| x / 2)).collect::<BTreeSet<_>>().into_iter().collect();
    let lookup = v.lookup();
    let rows: Vec<Vec<f32>> = coords
        .par_iter()
        .map(|&o| {
            let mut acc: Vec<f64> = conv.bias.iter().map(|&b| b as f64).collect();
            for (k, d) in offsets3().enumerate() {
                let n: [i64; 3] = std::array::from_fn(|a| 2 * o[a] as i64 + d[a]);
                if n.iter().any(|&x| x < 0) {
                    continue;
                }
                if let Some(&i) = lookup.get(&[n[0] as u32, n[1] as u32, n[2] as u32]) {
                    accumulate(&mut acc, &conv.weight.data()[k * cout * cin..(k + 1) * cout * cin], v.feature(i));
                }
            }
            acc.into_iter().map(|a| silu(a as f32)).collect()
        })
        .collect();
    let feats = Tensor::from_rows(&rows, cout)?;
    SparseVoxelSet::new(coords, feats, grid)
}

fn offsets3() -> impl Iterator<Item = [i64; 3]> {
    (-1..=1).flat_map(|x| (-1..=1).flat_map(move |y| (-1..=1).map(move |z| [x, y, z])))
}

/// Scatters coarse features onto the occupancy of `fine` and adds them to
/// the fine features.
pub fn sparse_up(coarse: &SparseVoxelSet, fine: &SparseVoxelSet, conv: &SparseUp) -> Result<SparseVoxelSet> {
    let (cout, cin) = (conv.weight.dims()[3], conv.weight.dims()[4]);
    ensure!(
        (coarse.is_empty() || coarse.channels() == cin) && (fine.is_empty() || fine.channels() == cout),
        Shape,
        "upsampling kernel ({cout}, {cin}) does not fit {} -> {} channels",
        coarse.channels(),
        fine.channels()
    );
    let lookup = coarse.lookup();
    let mut out = fine.feats.clone();
    for (t, row) in fine.coords.iter().zip(out.data_mut().chunks_mut(cout.max(1))) {
        let parent = t.map(|x| x / 2);
        let Some(&p) = lookup.get(&parent) else {
            return Err(crate::Error::InvalidArgument(format!("fine voxel {t:?} has no coarse parent")));
        };
        let k = ((t[0] % 2) * 4 + (t[1] % 2) * 2 + t[2] % 2) as usize;
        let mut acc = vec![0f64; cout];
        accumulate(&mut acc, &conv.weight.data()[k * cout * cin..(k + 1) * cout * cin], coarse.feature(p));
        for (r, a) in row.iter_mut().zip(acc) {
            *r = (*r as f64 + a) as f32;
        }
    }
    fine.with_feats(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HvfScale {
    pub iv_lidar: SsmBlockWeights,
    pub iv_image: SsmBlockWeights,
    pub cv: SsmBlockWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HvfWeights {
    pub scales: Vec<HvfScale>,
    /// `(lidar, image)` per transition between consecutive scales.
    pub down: Vec<(SparseDown, SparseDown)>,
    pub up: Vec<(SparseUp, SparseUp)>,
}

impl HvfWeights {
    pub fn init(p: &ParamInit, channels: usize, d_state: usize) -> Self {
        let scales = (0..NUM_SCALES)
            .map(|s| {
                let q = p.sub(&format!("scale{s}"));
                HvfScale {
                    iv_lidar: SsmBlockWeights::init(&q.sub("iv_lidar"), channels, d_state),
                    iv_image: SsmBlockWeights::init(&q.sub("iv_image"), channels, d_state),
                    cv: SsmBlockWeights::init(&q.sub("cv"), channels, d_state),
                }
            })
            .collect();
        let down = (0..NUM_SCALES - 1)
            .map(|s| {
                let q = p.sub(&format!("down{s}"));
                (SparseDown::init(&q, "lidar", channels, channels), SparseDown::init(&q, "image", channels, channels))
            })
            .collect();
        let up = (0..NUM_SCALES - 1)
            .map(|s| {
                let q = p.sub(&format!("up{s}"));
                (SparseUp::init(&q, "lidar", channels, channels), SparseUp::init(&q, "image", channels, channels))
            })
            .collect();
        Self { scales, down, up }
    }

    /// Zeroes every block output and upsampling kernel, so the network
    /// returns its inputs unchanged.
    pub fn make_identity(&mut self) {
        for s in &mut self.scales {
            s.iv_lidar.make_identity();
            s.iv_image.make_identity();
            s.cv.make_identity();
        }
        for (l, i) in &mut self.up {
            l.zero();
            i.zero();
        }
    }

    fn validate(&self) -> Result<()> {
        ensure!(
            self.scales.len() == NUM_SCALES && self.down.len() == NUM_SCALES - 1 && self.up.len() == NUM_SCALES - 1,
            InvalidArgument,
            "voxel fusion needs {NUM_SCALES} scales"
        );
        Ok(())
    }
}

fn fuse_scale(l: &SparseVoxelSet, i: &SparseVoxelSet, w: &HvfScale) -> Result<(SparseVoxelSet, SparseVoxelSet)> {
    let (l, i) = rayon::join(|| iv_mamba(l, &w.iv_lidar), || iv_mamba(i, &w.iv_image));
    let merged = cv_merge(&l?, &i?)?;
    cv_split(&cv_mamba(&merged, &w.cv)?)
}

/// Per-scale voxel counts seen on the way down, `(lidar, image)`.
pub type ScaleCounts = Vec<(usize, usize)>;

pub fn hvf_forward(
    lidar: &SparseVoxelSet,
    image: &SparseVoxelSet,
    w: &HvfWeights,
) -> Result<(SparseVoxelSet, SparseVoxelSet, ScaleCounts)> {
    w.validate()?;
    let mut skips = Vec::with_capacity(NUM_SCALES - 1);
    let mut counts = Vec::with_capacity(NUM_SCALES);
    let (mut l, mut i) = (lidar.clone(), image.clone());
    for s in 0..NUM_SCALES {
        counts.push((l.len(), i.len()));
        let (fl, fi) = fuse_scale(&l, &i, &w.scales[s])?;
        if s + 1 < NUM_SCALES {
            let (dl, di) = &w.down[s];
            let (nl, ni) = rayon::join(|| sparse_down(&fl, dl), || sparse_down(&fi, di));
            let nl = nl?;
            let mut ni = ni?;
            // an odd LiDAR height rounds up; keep the image grid its companion
            ni.grid = nl.grid.image_companion();
            skips.push((fl, fi));
            (l, i) = (nl, ni);
        } else {
            (l, i) = (fl, fi);
        }
    }
    for s in (0..NUM_SCALES - 1).rev() {
        let (sl, si) = &skips[s];
        let (ul, ui) = &w.up[s];
        let (nl, ni) = rayon::join(|| sparse_up(&l, sl, ul), || sparse_up(&i, si, ui));
        (l, i) = (nl?, ni?);
    }
    Ok((l, i, counts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridSpec;
    use crate::oracle;
    use crate::rng::PrngState;
    use proptest::prelude::*;

    fn lidar_grid(n: u32, z: u32) -> GridSpec {
        GridSpec { origin: [0.0; 3], voxel_size: [1.0, 1.0, 2.0], extents: [n, n, z] }
    }

    fn random_set(rng: &mut PrngState, grid: GridSpec, count: usize, c: usize) -> SparseVoxelSet {
        let mut coords = BTreeSet::new();
        for _ in 0..count {
            coords.insert([
                rng.below(grid.extents[0] as usize) as u32,
                rng.below(grid.extents[1] as usize) as u32,
                rng.below(grid.extents[2] as usize) as u32,
            ]);
        }
        let coords: Vec<Coord> = coords.into_iter().collect();
        let data = (0..coords.len() * c).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        SparseVoxelSet::new(coords.clone(), Tensor::new(vec![coords.len(), c], data).unwrap(), grid).unwrap()
    }

    fn pair(seed: u64, n: usize) -> (SparseVoxelSet, SparseVoxelSet) {
        let mut rng = PrngState::new(seed);
        let g = lidar_grid(8, 4);
        (random_set(&mut rng, g, n, 4), random_set(&mut rng, g.image_companion(), n, 4))
    }

    #[test]
    fn coincident_voxels_lidar_first() {
        let g = lidar_grid(4, 2);
        let l = SparseVoxelSet::new(vec![[1, 1, 1]], Tensor::full(&[1, 2], 1.0), g).unwrap();
        let i = SparseVoxelSet::new(vec![[1, 1, 2]], Tensor::full(&[1, 2], 2.0), g.image_companion()).unwrap();
        let m = cv_merge(&l, &i).unwrap();
        assert_eq!(m.elements.len(), 2);
        assert_eq!(m.elements[0].tag, Modality::Lidar);
        assert_eq!(m.elements[0].coord, [1, 1, 2]);
        assert_eq!(m.feats.data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn disjoint_pair_in_curve_order() {
        let g = lidar_grid(4, 2);
        let l = SparseVoxelSet::new(vec![[3, 3, 1]], Tensor::zeros(&[1, 1]), g).unwrap();
        let i = SparseVoxelSet::new(vec![[0, 0, 0]], Tensor::zeros(&[1, 1]), g.image_companion()).unwrap();
        let m = cv_merge(&l, &i).unwrap();
        assert_eq!(m.elements[0].tag, Modality::Image);
        assert_eq!(m.elements[1].coord, [3, 3, 2]);
    }

    #[test]
    fn merge_rejects_misaligned_grids() {
        let g = lidar_grid(4, 2);
        let l = SparseVoxelSet::empty(g, 2);
        assert!(cv_merge(&l, &SparseVoxelSet::empty(g, 2)).is_err());
    }

    #[test]
    fn merge_order_matches_comparator_oracle() {
        for seed in 0..20 {
            let (l, i) = pair(seed, 30);
            let m = cv_merge(&l, &i).unwrap();
            let want = oracle::merge_order(&l.coords, &i.coords, bits_for(8));
            let got: Vec<(bool, usize)> = m.elements.iter().map(|e| (e.tag == Modality::Image, e.index)).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn split_with_empty_image() {
        let (l, _) = pair(3, 20);
        let i = SparseVoxelSet::empty(l.grid.image_companion(), 4);
        let (l2, i2) = cv_split(&cv_merge(&l, &i).unwrap()).unwrap();
        assert_eq!(l2, l);
        assert!(i2.is_empty());
    }

    proptest! {
        #[test]
        fn merge_split_roundtrip(seed in 0u64..10_000, n in 0usize..40) {
            let (l, i) = pair(seed, n);
            let (l2, i2) = cv_split(&cv_merge(&l, &i).unwrap()).unwrap();
            prop_assert_eq!(l2, l);
            prop_assert_eq!(i2, i);
        }
    }

    #[test]
    fn identity_cv_keeps_features() {
        let (l, i) = pair(4, 40);
        let mut w = SsmBlockWeights::init(&ParamInit::new(1), 4, 4);
        w.make_identity();
        let (l2, i2) = cv_split(&cv_mamba(&cv_merge(&l, &i).unwrap(), &w).unwrap()).unwrap();
        assert_eq!(l2, l);
        assert_eq!(i2, i);
    }

    #[test]
    fn cross_talk_when_active() {
        let (l, i) = pair(5, 40);
        let w = SsmBlockWeights::init(&ParamInit::new(2), 4, 4);
        let (l2, _) = cv_split(&cv_mamba(&cv_merge(&l, &i).unwrap(), &w).unwrap()).unwrap();
        let mut i_alt = i.clone();
        i_alt.feats.data_mut().iter_mut().enumerate().for_each(|(k, v)| *v = (k % 7) as f32 - 3.0);
        let (l3, _) = cv_split(&cv_mamba(&cv_merge(&l, &i_alt).unwrap(), &w).unwrap()).unwrap();
        assert!(l2.feats.max_abs_diff(&l3.feats) > 0.0);
    }

    #[test]
    fn down_single_voxel() {
        let g = lidar_grid(8, 8);
        let v = SparseVoxelSet::new(vec![[4, 4, 4]], Tensor::full(&[1, 2], 1.0), g).unwrap();
        let conv = SparseDown::init(&ParamInit::new(3), "d", 3, 2);
        let d = sparse_down(&v, &conv).unwrap();
        assert_eq!(d.coords, vec![[2, 2, 2]]);
        assert_eq!(d.grid.extents, [4, 4, 4]);
    }

    #[test]
    fn down_matches_dense_oracle() {
        let mut rng = PrngState::new(6);
        for seed in 0..10 {
            let v = random_set(&mut rng, lidar_grid(8, 8), 60, 3);
            let conv = SparseDown::init(&ParamInit::new(seed), "d", 2, 3);
            let d = sparse_down(&v, &conv).unwrap();
            let want_coords: BTreeSet<Coord> = v.coords.iter().map(|c| c.map(|x| x / 2)).collect();
            assert_eq!(d.coords, want_coords.into_iter().collect::<Vec<_>>());
            let dense = oracle::conv3d_stride2_dense(&v, &conv.weight, &conv.bias);
            for (k, c) in d.coords.iter().enumerate() {
                let want = &dense[&(c[0] as usize, c[1] as usize, c[2] as usize)];
                for (a, b) in d.feature(k).iter().zip(want) {
                    assert!((a - b).abs() < 1e-5, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn up_zero_coarse_is_skip() {
        let mut rng = PrngState::new(7);
        let v = random_set(&mut rng, lidar_grid(8, 8), 40, 3);
        let coarse = sparse_down(&v, &SparseDown::init(&ParamInit::new(1), "d", 3, 3)).unwrap();
        let coarse = coarse.with_feats(Tensor::zeros(&[coarse.len(), 3])).unwrap();
        let up = sparse_up(&coarse, &v, &SparseUp::init(&ParamInit::new(1), "u", 3, 3)).unwrap();
        assert_eq!(up, v);
    }

    #[test]
    fn up_touches_only_children() {
        let g = lidar_grid(8, 8);
        let coarse = SparseVoxelSet::new(vec![[1, 1, 1], [3, 3, 3]], Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap(), g.downsampled()).unwrap();
        let fine = SparseVoxelSet::new(vec![[2, 2, 2], [3, 2, 3], [6, 6, 6]], Tensor::zeros(&[3, 1]), g).unwrap();
        let conv = SparseUp { weight: Tensor::full(&[2, 2, 2, 1, 1], 1.0) };
        let up = sparse_up(&coarse, &fine, &conv).unwrap();
        assert_eq!(up.feats.data(), &[1.0, 1.0, 0.0]);
        let orphan = SparseVoxelSet::new(vec![[0, 0, 0]], Tensor::zeros(&[1, 1]), g).unwrap();
        assert!(sparse_up(&coarse, &orphan, &conv).is_err());
    }

    #[test]
    fn up_down_roundtrip_occupancy() {
        let mut rng = PrngState::new(8);
        for _ in 0..10 {
            let v = random_set(&mut rng, lidar_grid(8, 8), 50, 2);
            let d = sparse_down(&v, &SparseDown::init(&ParamInit::new(2), "d", 2, 2)).unwrap();
            let u = sparse_up(&d, &v, &SparseUp::init(&ParamInit::new(2), "u", 2, 2)).unwrap();
            assert_eq!(u.coords, v.coords);
            assert_eq!(oracle::children_present(&d.coords, &v.coords), v.coords.len());
        }
    }

    #[test]
    fn identity_network_passes_through() {
        let (l, i) = pair(9, 60);
        let mut w = HvfWeights::init(&ParamInit::new(3), 4, 4);
        w.make_identity();
        let (l2, i2, counts) = hvf_forward(&l, &i, &w).unwrap();
        assert_eq!(l2, l);
        assert_eq!(i2, i);
        assert_eq!(counts.len(), 3);
    }

    #[test]
    fn forward_preserves_occupancy_and_is_deterministic() {
        let (l, i) = pair(10, 60);
        let w = HvfWeights::init(&ParamInit::new(4), 4, 4);
        let (l2, i2, _) = hvf_forward(&l, &i, &w).unwrap();
        assert_eq!(l2.coords, l.coords);
        assert_eq!(i2.coords, i.coords);
        assert!(l2.feats.is_finite() && i2.feats.is_finite());
        assert_ne!(l2.feats, l.feats);
        let (l3, i3, _) = hvf_forward(&l, &i, &w).unwrap();
        assert_eq!((l2, i2), (l3, i3));
    }

    #[test]
    fn empty_image_branch() {
        let (l, _) = pair(11, 40);
        let i = SparseVoxelSet::empty(l.grid.image_companion(), 4);
        let w = HvfWeights::init(&ParamInit::new(5), 4, 4);
        let (l2, i2, _) = hvf_forward(&l, &i, &w).unwrap();
        assert_eq!(l2.coords, l.coords);
        assert!(l2.feats.is_finite());
        assert!(i2.is_empty());
    }

    #[test]
    fn odd_height_grid() {
        let mut rng = PrngState::new(12);
        let g = lidar_grid(6, 3);
        let l = random_set(&mut rng, g, 30, 4);
        let i = random_set(&mut rng, g.image_companion(), 30, 4);
        let w = HvfWeights::init(&ParamInit::new(6), 4, 4);
        let (l2, i2, _) = hvf_forward(&l, &i, &w).unwrap();
        assert_eq!(l2.coords, l.coords);
        assert_eq!(i2.coords, i.coords);
    }
}
