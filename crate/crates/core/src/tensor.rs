use crate::error::{ensure, Result};

/// Dense row-major `f32` tensor with explicit extents.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        ensure!(
            numel == data.len(),
            Shape,
            "dims {:?} need {} values, got {}",
            dims,
            numel,
            data.len()
        );
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let numel = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(dims: &[usize], value: f32) -> Self {
        let numel = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![value; numel] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Number of rows when viewed as a matrix over the last axis.
    pub fn rows(&self) -> usize {
        if self.dims.is_empty() {
            return 1;
        }
        let cols = self.cols();
        if cols == 0 {
            return self.dims[..self.dims.len() - 1].iter().product();
        }
        self.data.len() / cols
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        self.dims.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        ensure!(numel == self.data.len(), Shape, "cannot reshape {:?} into {:?}", self.dims, dims);
        self.dims = dims;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks equal-width rows into an `(n, width)` matrix.
    pub fn from_rows(rows: &[Vec<f32>], width: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            ensure!(r.len() == width, Shape, "row of width {} in a {}-wide matrix", r.len(), width);
            data.extend_from_slice(r);
        }
        Ok(Self { dims: vec![rows.len(), width], data })
    }

    /// Gathers rows by index into a new `(idx.len(), cols)` matrix.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { dims: vec![idx.len(), c], data }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}
