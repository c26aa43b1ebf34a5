//! Serialization orders: the 3D Hilbert curve for sparse voxels and the four
//! raster directions used to unfold BEV maps.

use crate::error::{ensure, Result};
use crate::tensor::Tensor;
use crate::voxel::{Coord, SparseVoxelSet};

pub const MAX_BITS: u32 = 20;

/// Hilbert index of `(x, y, z)` on a `2^bits` cube (Skilling's transform).
pub fn hilbert_index(x: u32, y: u32, z: u32, bits: u32) -> Result<u64> {
    ensure!(bits <= MAX_BITS, InvalidArgument, "curve order {bits} exceeds {MAX_BITS} bits");
    let side = 1u64 << bits;
    ensure!(
        (x as u64) < side && (y as u64) < side && (z as u64) < side,
        OutOfRange,
        "({x}, {y}, {z}) outside a {side}-cell cube"
    );
    if bits == 0 {
        return Ok(0);
    }
    let mut v = [x, y, z];
    axes_to_transpose(&mut v, bits);
    let mut index = 0u64;
    for j in (0..bits).rev() {
        for &c in &v {
            index = (index << 1) | ((c >> j) & 1) as u64;
        }
    }
    Ok(index)
}

/// Inverse of [`hilbert_index`].
pub fn hilbert_point(index: u64, bits: u32) -> Result<Coord> {
    ensure!(bits <= MAX_BITS, InvalidArgument, "curve order {bits} exceeds {MAX_BITS} bits");
    ensure!(index < 1u64 << (3 * bits), OutOfRange, "index {index} outside a {bits}-bit curve");
    let mut v = [0u32; 3];
    for j in 0..bits {
        for (i, c) in v.iter_mut().enumerate() {
            let bit = (index >> (3 * j + (2 - i as u32))) & 1;
            *c |= (bit as u32) << j;
        }
    }
    if bits > 0 {
        transpose_to_axes(&mut v, bits);
    }
    Ok(v)
}

fn axes_to_transpose(x: &mut [u32; 3], bits: u32) {
    let m = 1u32 << (bits - 1);
    let mut q = m;
    while q > 1 {
        let p = q - 1;
        for i in 0..3 {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }
    for i in 1..3 {
        x[i] ^= x[i - 1];
    }
    let mut t = 0;
    let mut q = m;
    while q > 1 {
        if x[2] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for c in x.iter_mut() {
        *c ^= t;
    }
}

fn transpose_to_axes(x: &mut [u32; 3], bits: u32) {
    let n = 2u32 << (bits - 1);
    let t = x[2] >> 1;
    for i in (1..3).rev() {
        x[i] ^= x[i - 1];
    }
    x[0] ^= t;
    let mut q = 2;
    while q != n {
        let p = q - 1;
        for i in (0..3).rev() {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q <<= 1;
    }
}

/// Smallest curve order whose cube covers `extent` cells per axis.
pub fn bits_for(extent: u32) -> u32 {
    if extent <= 1 {
        0
    } else {
        32 - (extent - 1).leading_zeros()
    }
}

/// A serialization of `n` elements: `permutation[k]` is the element at
/// sequence position `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CurveOrder {
    pub order_bits: u32,
    pub permutation: Vec<usize>,
}

/// Orders coordinates along the Hilbert curve; the sort is stable.
pub fn hilbert_order(coords: &[Coord], bits: u32) -> Result<Vec<usize>> {
    let keys = coords
        .iter()
        .map(|c| hilbert_index(c[0], c[1], c[2], bits))
        .collect::<Result<Vec<_>>>()?;
    let mut perm: Vec<usize> = (0..coords.len()).collect();
    perm.sort_by_key(|&i| keys[i]);
    Ok(perm)
}

pub fn hilbert_sort(v: &SparseVoxelSet) -> Result<CurveOrder> {
    let bits = bits_for(*v.grid.extents.iter().max().unwrap());
    Ok(CurveOrder { order_bits: bits, permutation: hilbert_order(&v.coords, bits)? })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanDirection {
    RowForward,
    RowReverse,
    ColumnForward,
    ColumnReverse,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] =
        [Self::RowForward, Self::RowReverse, Self::ColumnForward, Self::ColumnReverse];
}

/// The four raster unfoldings of an `h x w` map, as flat cell indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanSet2D {
    pub h: usize,
    pub w: usize,
    pub orders: [Vec<usize>; 4],
}

impl ScanSet2D {
    pub fn order(&self, d: ScanDirection) -> &[usize] {
        &self.orders[d as usize]
    }
}

pub fn scan_orders_2d(h: usize, w: usize) -> Result<ScanSet2D> {
    ensure!(h >= 1 && w >= 1, InvalidArgument, "scan of an empty {h}x{w} map");
    let row: Vec<usize> = (0..h * w).collect();
    let col: Vec<usize> = (0..w).flat_map(|c| (0..h).map(move |r| r * w + c)).collect();
    let rev = |v: &Vec<usize>| v.iter().rev().copied().collect::<Vec<_>>();
    Ok(ScanSet2D { h, w, orders: [row.clone(), rev(&row), col.clone(), rev(&col)] })
}

/// Unfolds an `(h, w, c)` map into an `(h*w, c)` sequence along `order`.
pub fn scan_gather(map: &Tensor, order: &[usize]) -> Tensor {
    let c = map.cols();
    let flat = Tensor::new(vec![map.numel() / c.max(1), c], map.data().to_vec()).expect("reshape of a map");
    flat.gather_rows(order)
}

/// Scatters each directional sequence back to the map and sums the four.
pub fn cross_merge_2d(outputs: &[Tensor; 4], scans: &ScanSet2D) -> Result<Tensor> {
    let n = scans.h * scans.w;
    let c = outputs[0].cols();
    for o in outputs {
        ensure!(
            o.dims() == [n, c],
            Shape,
            "directional output {:?} does not match ({n}, {c})",
            o.dims()
        );
    }
    let mut out = Tensor::zeros(&[scans.h, scans.w, c]);
    let data = out.data_mut();
    for (seq, order) in outputs.iter().zip(&scans.orders) {
        for (pos, &cell) in order.iter().enumerate() {
            for (o, &v) in data[cell * c..(cell + 1) * c].iter_mut().zip(seq.row(pos)) {
                *o += v;
            }
        }
    }
    Ok(out)
}
