use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{ensure, Result};
use crate::geometry::GridSpec;
use crate::tensor::Tensor;

/// Integer voxel coordinate `(ix, iy, iz)`.
pub type Coord = [u32; 3];

/// Feature width produced by [`voxelize`]: three mean offsets, mean intensity, count.
pub const POINT_FEATURES: usize = 5;

/// Occupied voxels of a grid with one feature row each.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseVoxelSet {
    pub coords: Vec<Coord>,
    pub feats: Tensor,
    pub grid: GridSpec,
}

impl SparseVoxelSet {
    pub fn new(coords: Vec<Coord>, feats: Tensor, grid: GridSpec) -> Result<Self> {
        grid.validate()?;
        ensure!(
            feats.dims().len() == 2 && feats.dims()[0] == coords.len(),
            Shape,
            "{} coords but features of shape {:?}",
            coords.len(),
            feats.dims()
        );
        let mut seen = HashSet::with_capacity(coords.len());
        for c in &coords {
            ensure!(
                (0..3).all(|a| c[a] < grid.extents[a]),
                OutOfRange,
                "coord {:?} outside grid extents {:?}",
                c,
                grid.extents
            );
            ensure!(seen.insert(*c), InvalidArgument, "duplicate voxel coord {:?}", c);
        }
        Ok(Self { coords, feats, grid })
    }

    pub fn empty(grid: GridSpec, channels: usize) -> Self {
        Self { coords: Vec::new(), feats: Tensor::zeros(&[0, channels]), grid }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.feats.cols()
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        self.feats.row(i)
    }

    pub fn lookup(&self) -> HashMap<Coord, usize> {
        self.coords.iter().enumerate().map(|(i, &c)| (c, i)).collect()
    }

    /// Same occupancy with replacement features.
    pub fn with_feats(&self, feats: Tensor) -> Result<Self> {
        ensure!(
            feats.dims().len() == 2 && feats.dims()[0] == self.len(),
            Shape,
            "replacement features {:?} for {} voxels",
            feats.dims(),
            self.len()
        );
        Ok(Self { coords: self.coords.clone(), feats, grid: self.grid })
    }
}

/// Groups `(x, y, z, intensity)` points into occupied voxels.
///
/// Each voxel's feature is the mean offset of its points from the voxel
/// center, the mean intensity, and the point count. Out-of-grid points are
/// dropped. Voxels are emitted in lexicographic coordinate order.
pub fn voxelize(points: &Tensor, grid: &GridSpec) -> Result<SparseVoxelSet> {
    grid.validate()?;
    ensure!(
        points.dims().len() == 2 && points.dims()[1] == 4,
        Shape,
        "points must be n x 4, got {:?}",
        points.dims()
    );
    let mut acc: BTreeMap<Coord, [f64; 5]> = BTreeMap::new();
    for p in points.data().chunks_exact(4) {
        let xyz = [p[0] as f64, p[1] as f64, p[2] as f64];
        let Some(c) = grid.coord_of(xyz) else { continue };
        let center = grid.center(c);
        let a = acc.entry(c).or_insert([0.0; 5]);
        for k in 0..3 {
            a[k] += xyz[k] - center[k];
        }
        a[3] += p[3] as f64;
        a[4] += 1.0;
    }
    let mut coords = Vec::with_capacity(acc.len());
    let mut data = Vec::with_capacity(acc.len() * POINT_FEATURES);
    for (c, a) in acc {
        coords.push(c);
        let n = a[4];
        data.extend_from_slice(&[
            (a[0] / n) as f32,
            (a[1] / n) as f32,
            (a[2] / n) as f32,
            (a[3] / n) as f32,
            n as f32,
        ]);
    }
    let feats = Tensor::new(vec![coords.len(), POINT_FEATURES], data)?;
    Ok(SparseVoxelSet { coords, feats, grid: *grid })
}
