use crate::error::{ensure, Result};
use crate::geometry::{BevFrame, GridSpec};
use crate::tensor::Tensor;

/// Dense `(H, W, C)` bird's-eye-view raster placed in the world by a [`BevFrame`].
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    pub frame: BevFrame,
}

impl FeatureMap {
    pub fn new(data: Tensor, frame: BevFrame) -> Result<Self> {
        ensure!(data.dims().len() == 3, Shape, "feature map must be (H, W, C), got {:?}", data.dims());
        Ok(Self { data, frame })
    }

    pub fn zeros(h: usize, w: usize, c: usize, frame: BevFrame) -> Self {
        Self { data: Tensor::zeros(&[h, w, c]), frame }
    }

    /// Zero map covering the footprint of `grid`.
    pub fn for_grid(grid: &GridSpec, c: usize) -> Self {
        Self::zeros(grid.extents[1] as usize, grid.extents[0] as usize, c, grid.bev_frame())
    }

    pub fn h(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn w(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn c(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn cell(&self, r: usize, c: usize) -> &[f32] {
        let ch = self.c();
        &self.data.data()[(r * self.w() + c) * ch..][..ch]
    }

    pub fn cell_mut(&mut self, r: usize, c: usize) -> &mut [f32] {
        let (ch, w) = (self.c(), self.w());
        &mut self.data.data_mut()[(r * w + c) * ch..][..ch]
    }

    /// Cells as an `(H*W, C)` matrix.
    pub fn as_rows(&self) -> Tensor {
        Tensor::new(vec![self.h() * self.w(), self.c()], self.data.data().to_vec()).unwrap()
    }

    /// Rebuilds a map of this footprint from `(H*W, C')` rows.
    pub fn from_rows(&self, rows: Tensor) -> Result<Self> {
        ensure!(rows.rows() == self.h() * self.w(), Shape, "{} rows for a {}x{} map", rows.rows(), self.h(), self.w());
        let c = rows.cols();
        Ok(Self { data: rows.reshape(vec![self.h(), self.w(), c])?, frame: self.frame })
    }

    pub fn same_footprint(&self, other: &FeatureMap) -> bool {
        self.h() == other.h() && self.w() == other.w()
    }
}
