//! Run configuration with the desk-scale defaults.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::geometry::GridSpec;
use crate::hvf::STRIDES;
use crate::pqg::PqgParams;
use crate::viewtrans::{DepthBinSpec, SafsParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Channels {
    pub image: usize,
    pub voxel: usize,
    pub bev: usize,
    pub d_state: usize,
    pub cb_hidden: usize,
    pub hidden: usize,
}

impl Default for Channels {
    fn default() -> Self {
        Self { image: 16, voxel: 16, bev: 32, d_state: 16, cb_hidden: 64, hidden: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub lidar_grid: GridSpec,
    pub image_grid: GridSpec,
    /// Depth score threshold for image voxels.
    #[serde(rename = "d")]
    pub depth_threshold: f32,
    /// Semantic score threshold for image voxels.
    #[serde(rename = "s")]
    pub semantic_threshold: f32,
    /// Cap on selected image voxels.
    #[serde(rename = "N")]
    pub max_image_voxels: usize,
    pub depth_bins: DepthBinSpec,
    pub k_easy: usize,
    pub k_hard: usize,
    pub mask_kernel: usize,
    #[serde(rename = "N_bev")]
    pub n_bev: usize,
    #[serde(rename = "M_vox")]
    pub m_vox: usize,
    pub strides: Vec<u32>,
    pub channels: Channels,
    pub num_classes: usize,
    pub grid_side: usize,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        let lidar_grid = GridSpec { origin: [-54.0, -54.0, -5.0], voxel_size: [1.5, 1.5, 2.0], extents: [72, 72, 4] };
        Self {
            image_grid: lidar_grid.image_companion(),
            lidar_grid,
            depth_threshold: 0.01,
            semantic_threshold: 0.25,
            max_image_voxels: 18000,
            depth_bins: DepthBinSpec { d_min: 1.0, d_max: 54.0, count: 32 },
            k_easy: 100,
            k_hard: 100,
            mask_kernel: 3,
            n_bev: 3,
            m_vox: 1,
            strides: STRIDES.to_vec(),
            channels: Channels::default(),
            num_classes: 10,
            grid_side: 4,
            seed: 42,
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.lidar_grid.validate()?;
        self.image_grid.validate()?;
        self.lidar_grid.check_image_grid(&self.image_grid)?;
        self.depth_bins.validate()?;
        ensure!(
            (0.0..=1.0).contains(&self.depth_threshold) && (0.0..=1.0).contains(&self.semantic_threshold),
            InvalidArgument,
            "score thresholds must lie in [0, 1]"
        );
        ensure!(self.strides == STRIDES, InvalidArgument, "strides must be {STRIDES:?}, got {:?}", self.strides);
        ensure!(self.k_easy >= 1 && self.k_hard >= 1, InvalidArgument, "query counts must be positive");
        ensure!(self.mask_kernel % 2 == 1, InvalidArgument, "mask kernel must be odd");
        ensure!(self.num_classes >= 1, InvalidArgument, "need at least one class");
        ensure!(
            self.grid_side >= 2 && self.grid_side.pow(3) % 4 == 0,
            InvalidArgument,
            "grid side {} must be >= 2 with a cube divisible by 4",
            self.grid_side
        );
        let c = &self.channels;
        ensure!(
            [c.image, c.voxel, c.bev, c.d_state, c.cb_hidden, c.hidden].iter().all(|&w| w > 0),
            InvalidArgument,
            "channel widths must be positive"
        );
        Ok(())
    }

    pub fn safs(&self) -> SafsParams {
        SafsParams {
            depth_threshold: self.depth_threshold,
            semantic_threshold: self.semantic_threshold,
            max_voxels: self.max_image_voxels,
        }
    }

    pub fn pqg(&self) -> PqgParams {
        PqgParams { k_easy: self.k_easy, k_hard: self.k_hard, mask_kernel: self.mask_kernel }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = Config::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("\"d\":0.01") && text.contains("\"N\":18000") && text.contains("\"N_bev\":3"));
        assert_eq!(Config::from_json(&text).unwrap(), c);
        assert_eq!(Config::from_json("{}").unwrap(), c);
    }

    #[test]
    fn partial_override() {
        let c = Config::from_json(r#"{"k_easy": 5, "channels": {"bev": 8}}"#).unwrap();
        assert_eq!(c.k_easy, 5);
        assert_eq!(c.channels.bev, 8);
        assert_eq!(c.channels.voxel, 16);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::from_json(r#"{"strides": [1, 2]}"#).is_err());
        assert!(Config::from_json(r#"{"d": 1.5}"#).is_err());
        assert!(Config::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(Config::from_json(r#"{"mask_kernel": 2}"#).is_err());
    }
}
