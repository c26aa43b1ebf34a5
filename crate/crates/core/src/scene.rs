//! Synthetic scenes: box-surface point clouds with ground clutter, blob
//! images from a camera rig, and the scene directory format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::CameraModel;
use crate::io::{read_tensor, write_tensor};
use crate::rng::PrngState;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub class: usize,
    pub center: [f64; 3],
    /// `(length, width, height)` in meters.
    pub size: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
    /// Surface points per square meter.
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Half-width of the uniform per-axis jitter, meters.
    pub jitter: f64,
    /// Number of ground clutter points.
    pub clutter: usize,
    pub ground_z: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { jitter: 0.0, clutter: 2000, ground_z: -1.8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    #[serde(default = "default_range")]
    pub range: [[f64; 3]; 2],
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
    /// Defaults to a four-camera surround rig.
    #[serde(default)]
    pub cameras: Option<Vec<CameraModel>>,
    #[serde(default = "default_image_size")]
    pub image_size: [usize; 2],
    #[serde(default)]
    pub noise: NoiseSpec,
}

fn default_range() -> [[f64; 3]; 2] {
    [[-54.0, -54.0, -5.0], [54.0, 54.0, 3.0]]
}

fn default_image_size() -> [usize; 2] {
    [64, 176]
}

impl SceneSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.range;
        ensure!((0..3).all(|a| lo[a] < hi[a]), InvalidArgument, "empty world range");
        for (i, o) in self.objects.iter().enumerate() {
            ensure!(
                (0..3).all(|a| o.center[a] >= lo[a] && o.center[a] <= hi[a]),
                InvalidArgument,
                "object {i} center {:?} outside the world range",
                o.center
            );
            ensure!(o.size.iter().all(|&s| s > 0.0 && s.is_finite()), InvalidArgument, "object {i} needs positive size");
            ensure!(o.density > 0.0 && o.density.is_finite(), InvalidArgument, "object {i} needs positive density");
            ensure!(o.yaw.is_finite(), InvalidArgument, "object {i} yaw is not finite");
        }
        ensure!(self.noise.jitter >= 0.0, InvalidArgument, "jitter must be non-negative");
        ensure!(self.image_size[0] > 0 && self.image_size[1] > 0, InvalidArgument, "image size must be positive");
        if let Some(cams) = &self.cameras {
            cams.iter().try_for_each(CameraModel::validate)?;
        }
        Ok(())
    }

    pub fn rig(&self) -> Vec<CameraModel> {
        self.cameras.clone().unwrap_or_else(|| default_rig(self.image_size))
    }
}

/// Four cameras at the origin facing +x, +y, -x, -y with a 90 degree field of view.
pub fn default_rig(image_size: [usize; 2]) -> Vec<CameraModel> {
    (0..4)
        .map(|i| CameraModel::looking([0.0; 3], i as f64 * std::f64::consts::FRAC_PI_2, 90.0, image_size))
        .collect()
}

/// Ground-truth box as stored in `gt.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class: usize,
}

/// Everything the pipeline reads.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `(n, 4)`: x, y, z, intensity.
    pub points: Tensor,
    /// `(H, W, 3)` per camera.
    pub images: Vec<Tensor>,
    pub cameras: Vec<CameraModel>,
}

const PALETTE: [[f32; 3]; 10] = [
    [1.0, 0.2, 0.2],
    [0.2, 1.0, 0.2],
    [0.2, 0.4, 1.0],
    [1.0, 1.0, 0.2],
    [1.0, 0.2, 1.0],
    [0.2, 1.0, 1.0],
    [1.0, 0.6, 0.2],
    [0.6, 0.2, 1.0],
    [0.9, 0.9, 0.9],
    [0.6, 1.0, 0.6],
];
const BACKGROUND: f32 = 0.05;

fn rotate(yaw: f64, p: [f64; 3]) -> [f64; 2] {
    let (s, c) = yaw.sin_cos();
    [p[0] * c - p[1] * s, p[0] * s + p[1] * c]
}

/// Box-frame surface samples, faces chosen with probability proportional to area.
pub fn sample_surface(o: &ObjectSpec, rng: &mut PrngState) -> Vec<[f64; 3]> {
    let [l, w, h] = o.size;
    let areas = [w * h, w * h, l * h, l * h, l * w, l * w];
    let total: f64 = areas.iter().sum();
    let n = (o.density * total).round() as usize;
    (0..n)
        .map(|_| {
            let mut r = rng.next_f64() * total;
            let mut face = 5;
            for (k, &a) in areas.iter().enumerate() {
                if r < a {
                    face = k;
                    break;
                }
                r -= a;
            }
            let axis = face / 2;
            let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
            let mut p = [0.0; 3];
            for (a, v) in p.iter_mut().enumerate() {
                *v = if a == axis { sign * o.size[a] / 2.0 } else { rng.uniform(-o.size[a] / 2.0, o.size[a] / 2.0) };
            }
            p
        })
        .collect()
}

pub fn to_world(o: &ObjectSpec, local: [f64; 3]) -> [f64; 3] {
    let [x, y] = rotate(o.yaw, local);
    [o.center[0] + x, o.center[1] + y, o.center[2] + local[2]]
}

fn corners(o: &ObjectSpec) -> Vec<[f64; 3]> {
    (0..8)
        .map(|k| {
            let local = [0, 1, 2].map(|a| if k >> a & 1 == 1 { o.size[a] / 2.0 } else { -o.size[a] / 2.0 });
            to_world(o, local)
        })
        .collect()
}

/// Paints each object as a filled ellipse inscribed in the image-space
/// bounds of its visible corners, far objects first.
pub fn render(objects: &[ObjectSpec], cam: &CameraModel) -> Tensor {
    let [h, w] = cam.image_size;
    let mut img = Tensor::full(&[h, w, 3], BACKGROUND);
    let mut order: Vec<(f64, usize)> = objects
        .iter()
        .enumerate()
        .filter_map(|(i, o)| cam.project(o.center).map(|(_, _, d)| (d, i)))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, i) in order {
        let o = &objects[i];
        let proj: Vec<(f64, f64)> = corners(o).iter().filter_map(|&p| cam.project(p)).map(|(u, v, _)| (u, v)).collect();
        if proj.is_empty() {
            continue;
        }
        let (u0, u1) = proj.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
        let (v0, v1) = proj.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
        let (cu, cv) = ((u0 + u1) / 2.0, (v0 + v1) / 2.0);
        let (ru, rv) = (((u1 - u0) / 2.0).max(0.5), ((v1 - v0) / 2.0).max(0.5));
        let color = PALETTE[o.class % PALETTE.len()];
        let rows = (v0.floor().max(0.0) as usize)..(v1.ceil().clamp(0.0, h as f64) as usize);
        for r in rows {
            let cols = (u0.floor().max(0.0) as usize)..(u1.ceil().clamp(0.0, w as f64) as usize);
            for c in cols {
                let (du, dv) = ((c as f64 + 0.5 - cu) / ru, (r as f64 + 0.5 - cv) / rv);
                if du * du + dv * dv <= 1.0 {
                    img.data_mut()[(r * w + c) * 3..][..3].copy_from_slice(&color);
                }
            }
        }
    }
    img
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedScene {
    pub scene: Scene,
    pub gt: Vec<GtBox>,
}

pub fn gen_scene(spec: &SceneSpec) -> Result<GeneratedScene> {
    spec.validate()?;
    let mut rng = PrngState::new(spec.seed);
    let mut pts: Vec<f32> = Vec::new();
    for o in &spec.objects {
        let base = 0.3 + 0.07 * (o.class % 10) as f64;
        for local in sample_surface(o, &mut rng) {
            let mut p = to_world(o, local);
            if spec.noise.jitter > 0.0 {
                p.iter_mut().for_each(|v| *v += rng.uniform(-spec.noise.jitter, spec.noise.jitter));
            }
            let intensity = (base + rng.uniform(-0.05, 0.05)).clamp(0.0, 1.0);
            pts.extend([p[0] as f32, p[1] as f32, p[2] as f32, intensity as f32]);
        }
    }
    let [lo, hi] = spec.range;
    for _ in 0..spec.noise.clutter {
        let x = rng.uniform(lo[0], hi[0]);
        let y = rng.uniform(lo[1], hi[1]);
        let z = spec.noise.ground_z + rng.uniform(0.0, 0.3);
        pts.extend([x as f32, y as f32, z as f32, rng.uniform(0.0, 0.2) as f32]);
    }
    let n = pts.len() / 4;
    let cameras = spec.rig();
    let images = cameras.iter().map(|c| render(&spec.objects, c)).collect();
    let gt = spec
        .objects
        .iter()
        .map(|o| GtBox { center: o.center, size: o.size, yaw: o.yaw, class: o.class })
        .collect();
    Ok(GeneratedScene { scene: Scene { points: Tensor::new(vec![n, 4], pts)?, images, cameras }, gt })
}

pub fn write_scene(dir: impl AsRef<Path>, g: &GeneratedScene) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_tensor(dir.join("points.bin"), &g.scene.points)?;
    for (i, img) in g.scene.images.iter().enumerate() {
        write_tensor(dir.join(format!("cam_{i}.bin")), img)?;
    }
    fs::write(dir.join("cameras.json"), serde_json::to_string_pretty(&g.scene.cameras)? + "\n")?;
    fs::write(dir.join("gt.json"), serde_json::to_string_pretty(&g.gt)? + "\n")?;
    Ok(())
}

pub fn load_scene(dir: impl AsRef<Path>) -> Result<Scene> {
    let dir = dir.as_ref();
    let points = read_tensor(dir.join("points.bin"))?;
    ensure!(
        points.dims().len() == 2 && points.dims()[1] == 4,
        Format,
        "points.bin must be (n, 4), got {:?}",
        points.dims()
    );
    let cams_path = dir.join("cameras.json");
    let text = fs::read_to_string(&cams_path).map_err(|e| Error::Format(format!("{}: {e}", cams_path.display())))?;
    let cameras: Vec<CameraModel> = serde_json::from_str(&text)?;
    let mut images = Vec::with_capacity(cameras.len());
    for (i, cam) in cameras.iter().enumerate() {
        cam.validate()?;
        let img = read_tensor(dir.join(format!("cam_{i}.bin")))?;
        ensure!(
            img.dims() == [cam.image_size[0], cam.image_size[1], 3],
            Format,
            "cam_{i}.bin is {:?}, camera expects {:?}x3",
            img.dims(),
            cam.image_size
        );
        images.push(img);
    }
    Ok(Scene { points, images, cameras })
}

pub fn load_gt(path: impl AsRef<Path>) -> Result<Vec<GtBox>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
