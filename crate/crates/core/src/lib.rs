pub mod bev;
pub mod config;
pub mod curve;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod hbf;
pub mod hvf;
pub mod io;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod pqg;
pub mod rng;
pub mod scene;
pub mod ssm;
pub mod tensor;
pub mod viewtrans;
pub mod voxel;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use bev::FeatureMap;
pub use config::{Channels, Config};
pub use decoder::{DetectionBox, ProposalBox};
pub use eval::{eval_detections, EvalResult};
pub use geometry::{BevFrame, CameraModel, GridSpec};
pub use pipeline::{run_pipeline, RunOutput, RunReport, Weights};
pub use pqg::{Query, Stage};
pub use scene::{gen_scene, load_gt, load_scene, write_scene, GtBox, Scene, SceneSpec};
pub use voxel::{voxelize, Coord, SparseVoxelSet};
