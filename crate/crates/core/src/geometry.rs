use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Axis-aligned voxel lattice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: [f64; 3],
    pub voxel_size: [f64; 3],
    pub extents: [u32; 3],
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.voxel_size.iter().all(|&s| s > 0.0 && s.is_finite()),
            InvalidArgument,
            "voxel sizes must be positive, got {:?}",
            self.voxel_size
        );
        ensure!(
            self.extents.iter().all(|&e| e > 0),
            InvalidArgument,
            "grid extents must be positive, got {:?}",
            self.extents
        );
        ensure!(
            self.origin.iter().all(|o| o.is_finite()),
            InvalidArgument,
            "grid origin must be finite"
        );
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.extents.iter().map(|&e| e as usize).product()
    }

    pub fn contains(&self, c: [i64; 3]) -> bool {
        (0..3).all(|a| c[a] >= 0 && c[a] < self.extents[a] as i64)
    }

    /// Integer cell containing `p`, possibly outside the grid.
    pub fn cell_of(&self, p: [f64; 3]) -> [i64; 3] {
        std::array::from_fn(|a| ((p[a] - self.origin[a]) / self.voxel_size[a]).floor() as i64)
    }

    pub fn coord_of(&self, p: [f64; 3]) -> Option<[u32; 3]> {
        let c = self.cell_of(p);
        self.contains(c).then(|| [c[0] as u32, c[1] as u32, c[2] as u32])
    }

    pub fn center(&self, c: [u32; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + (c[a] as f64 + 0.5) * self.voxel_size[a])
    }

    /// Lower and upper world bounds.
    pub fn range(&self) -> ([f64; 3], [f64; 3]) {
        let hi = std::array::from_fn(|a| self.origin[a] + self.extents[a] as f64 * self.voxel_size[a]);
        (self.origin, hi)
    }

    /// Grid after a stride-2 reduction.
    pub fn downsampled(&self) -> Self {
        Self {
            origin: self.origin,
            voxel_size: self.voxel_size.map(|s| s * 2.0),
            extents: self.extents.map(|e| e.div_ceil(2)),
        }
    }

    /// Image-voxel grid matching this LiDAR grid, with twice the height cells.
    pub fn image_companion(&self) -> Self {
        Self {
            origin: self.origin,
            voxel_size: [self.voxel_size[0], self.voxel_size[1], self.voxel_size[2] / 2.0],
            extents: [self.extents[0], self.extents[1], self.extents[2] * 2],
        }
    }

    /// Checks that `image` shares this grid's footprint and has `Z_I = 2 Z_L`.
    pub fn check_image_grid(&self, image: &GridSpec) -> Result<()> {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
        ensure!(
            self.extents[0] == image.extents[0] && self.extents[1] == image.extents[1],
            InvalidArgument,
            "image grid footprint {:?} differs from LiDAR grid {:?}",
            image.extents,
            self.extents
        );
        ensure!(
            image.extents[2] == 2 * self.extents[2],
            InvalidArgument,
            "image grid height {} must be twice the LiDAR height {}",
            image.extents[2],
            self.extents[2]
        );
        ensure!(
            (0..3).all(|a| close(self.origin[a], image.origin[a]))
                && close(self.voxel_size[0], image.voxel_size[0])
                && close(self.voxel_size[1], image.voxel_size[1])
                && close(self.voxel_size[2], 2.0 * image.voxel_size[2]),
            InvalidArgument,
            "image grid is not aligned with the LiDAR grid"
        );
        Ok(())
    }

    pub fn bev_frame(&self) -> BevFrame {
        BevFrame {
            origin: [self.origin[0], self.origin[1]],
            cell: [self.voxel_size[0], self.voxel_size[1]],
        }
    }
}

/// World placement of a BEV raster. Rows follow `y`, columns follow `x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevFrame {
    pub origin: [f64; 2],
    pub cell: [f64; 2],
}

impl BevFrame {
    /// World `(x, y)` of a fractional raster position, cell centers at integers.
    pub fn world(&self, row: f64, col: f64) -> [f64; 2] {
        [
            self.origin[0] + (col + 0.5) * self.cell[0],
            self.origin[1] + (row + 0.5) * self.cell[1],
        ]
    }

    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        self.world(row as f64, col as f64)
    }
}

/// Pinhole camera with a world-to-camera transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub intrinsics: [[f64; 3]; 3],
    pub extrinsics: [[f64; 4]; 4],
    /// `(height, width)` in pixels.
    pub image_size: [usize; 2],
}

/// Points closer than this to the image plane count as behind the camera.
const MIN_DEPTH: f64 = 1e-6;

impl CameraModel {
    /// Horizontal camera at `position` looking along `yaw` with the given
    /// horizontal field of view.
    pub fn looking(position: [f64; 3], yaw: f64, hfov_deg: f64, image_size: [usize; 2]) -> Self {
        let [h, w] = image_size;
        let f = (w as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        let forward = [yaw.cos(), yaw.sin(), 0.0];
        let right = [yaw.sin(), -yaw.cos(), 0.0];
        let down = [0.0, 0.0, -1.0];
        let rot = [right, down, forward];
        let mut ext = [[0.0; 4]; 4];
        for r in 0..3 {
            ext[r][..3].copy_from_slice(&rot[r]);
            ext[r][3] = -(0..3).map(|k| rot[r][k] * position[k]).sum::<f64>();
        }
        ext[3][3] = 1.0;
        Self {
            intrinsics: [[f, 0.0, w as f64 / 2.0], [0.0, f, h as f64 / 2.0], [0.0, 0.0, 1.0]],
            extrinsics: ext,
            image_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.intrinsics[2] == [0.0, 0.0, 1.0],
            InvalidArgument,
            "intrinsics bottom row must be (0, 0, 1)"
        );
        ensure!(
            self.extrinsics[3] == [0.0, 0.0, 0.0, 1.0],
            InvalidArgument,
            "extrinsics bottom row must be (0, 0, 0, 1)"
        );
        ensure!(
            self.image_size[0] > 0 && self.image_size[1] > 0,
            InvalidArgument,
            "image size must be positive"
        );
        ensure!(
            det3(&self.intrinsics).abs() > 1e-12 && det3(&self.rotation()).abs() > 1e-12,
            InvalidArgument,
            "camera matrices must be invertible"
        );
        Ok(())
    }

    fn rotation(&self) -> [[f64; 3]; 3] {
        std::array::from_fn(|r| [self.extrinsics[r][0], self.extrinsics[r][1], self.extrinsics[r][2]])
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let e = &self.extrinsics;
        std::array::from_fn(|r| e[r][0] * p[0] + e[r][1] * p[1] + e[r][2] * p[2] + e[r][3])
    }

    /// Projects a world point to continuous pixel coordinates `(u, v)` and
    /// camera depth. `None` when the point is behind the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        if c[2] <= MIN_DEPTH {
            return None;
        }
        let k = &self.intrinsics;
        let u = (k[0][0] * c[0] + k[0][1] * c[1] + k[0][2] * c[2]) / c[2];
        let v = (k[1][0] * c[0] + k[1][1] * c[1] + k[1][2] * c[2]) / c[2];
        Some((u, v, c[2]))
    }

    /// World point at camera depth `depth` along the ray through pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        let kinv = inv3(&self.intrinsics);
        let ray: [f64; 3] = std::array::from_fn(|r| kinv[r][0] * u + kinv[r][1] * v + kinv[r][2]);
        let pc: [f64; 3] = std::array::from_fn(|r| ray[r] * depth - self.extrinsics[r][3]);
        let rinv = inv3(&self.rotation());
        std::array::from_fn(|r| rinv[r][0] * pc[0] + rinv[r][1] * pc[1] + rinv[r][2] * pc[2])
    }
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inv3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let d = det3(m);
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    [
        [c(1, 1, 2, 2) / d, -c(0, 1, 2, 2) / d, c(0, 1, 1, 2) / d],
        [-c(1, 0, 2, 2) / d, c(0, 0, 2, 2) / d, -c(0, 0, 1, 2) / d],
        [c(1, 0, 2, 1) / d, -c(0, 0, 2, 1) / d, c(0, 0, 1, 1) / d],
    ]
}
