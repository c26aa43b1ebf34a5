//! Brute-force reference implementations.
//!
//! Every function here is a straight-line re-derivation that never calls the
//! optimized code path it is compared against; test suites and the
//! `ddhf oracle` command use them as ground truth.

use crate::decoder::{DeformableLayer, DetectionBox, MixWeights, ProposalBox};
use crate::geometry::{CameraModel, GridSpec};
use crate::hbf::{CbBranch, CbMambaWeights, DirectionWeights, IbMambaWeights};
use crate::nn::{Attention, Linear, Norm};
use crate::pqg::{HiaWeights, Query};
use crate::tensor::Tensor;
use crate::viewtrans::{DepthBinSpec, ImageFeatureSet};
use crate::voxel::SparseVoxelSet;

/// O(n²) unrolled selective scan:
/// `y_i = Σ_{j≤i} C_i · (Π_{k=j+1..i} Ā_k) B̄_j x_j + x_i`.
///
/// Decay products are taken as `exp(A Σ Δ_k)` and the ZOH input factor as
/// `(exp(ΔA) - 1) / A`, independent of the recurrence form.
pub fn ssm_dense(x: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, delta: &Tensor) -> Tensor {
    let n = x.dims()[0];
    let ch = x.dims()[1];
    let ns = a.dims()[1];
    let mut out = vec![0f32; n * ch];
    for chan in 0..ch {
        // prefix[i] = Σ_{k<i} Δ_k, so Σ_{k=j+1..i} Δ_k = prefix[i+1] - prefix[j+1]
        let mut prefix = vec![0f64; n + 1];
        for k in 0..n {
            prefix[k + 1] = prefix[k] + delta.data()[k * ch + chan] as f64;
        }
        for i in 0..n {
            let xi = x.data()[i * ch + chan] as f64;
            let mut acc = xi;
            for j in 0..=i {
                let xj = x.data()[j * ch + chan] as f64;
                let dj = delta.data()[j * ch + chan] as f64;
                let dsum = prefix[i + 1] - prefix[j + 1];
                for s in 0..ns {
                    let av = a.data()[chan * ns + s] as f64;
                    let bbar = if av == 0.0 {
                        dj * b.data()[j * ns + s] as f64
                    } else {
                        ((dj * av).exp() - 1.0) / av * b.data()[j * ns + s] as f64
                    };
                    acc += c.data()[i * ns + s] as f64 * (av * dsum).exp() * bbar * xj;
                }
            }
            out[i * ch + chan] = acc as f32;
        }
    }
    Tensor::new(vec![n, ch], out).unwrap()
}

/// Solves `m x = b` by Gaussian elimination with partial pivoting.
pub fn solve3(m: [[f64; 3]; 3], b: [f64; 3]) -> [f64; 3] {
    let mut a = [[0.0; 4]; 3];
    for r in 0..3 {
        a[r][..3].copy_from_slice(&m[r]);
        a[r][3] = b[r];
    }
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..3 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for k in col..4 {
                    a[r][k] -= f * a[col][k];
                }
            }
        }
    }
    std::array::from_fn(|r| a[r][3] / a[r][r])
}

/// Homogeneous pinhole projection `K [R | t] p`; `None` behind the camera.
pub fn pinhole(cam: &CameraModel, p: [f64; 3]) -> Option<(f64, f64, f64)> {
    let ph = [p[0], p[1], p[2], 1.0];
    let mut cam_p = [0.0; 3];
    for (r, v) in cam_p.iter_mut().enumerate() {
        *v = (0..4).map(|k| cam.extrinsics[r][k] * ph[k]).sum();
    }
    if cam_p[2] <= 1e-6 {
        return None;
    }
    let mut img = [0.0; 3];
    for (r, v) in img.iter_mut().enumerate() {
        *v = (0..3).map(|k| cam.intrinsics[r][k] * cam_p[k]).sum();
    }
    Some((img[0] / img[2], img[1] / img[2], cam_p[2]))
}

/// World point at depth `d` on the ray through `(u, v)`, by two linear solves.
pub fn back_project(cam: &CameraModel, u: f64, v: f64, d: f64) -> [f64; 3] {
    let ray = solve3(cam.intrinsics, [u * d, v * d, d]);
    let rot: [[f64; 3]; 3] = std::array::from_fn(|r| std::array::from_fn(|k| cam.extrinsics[r][k]));
    solve3(rot, std::array::from_fn(|r| ray[r] - cam.extrinsics[r][3]))
}

/// Bilinear lookup with edge clamping, pixel centers at integer positions.
pub fn bilinear(map: &Tensor, y: f64, x: f64) -> Vec<f64> {
    let (h, w, k) = (map.dims()[0], map.dims()[1], map.dims()[2]);
    let y = y.max(0.0).min((h - 1) as f64);
    let x = x.max(0.0).min((w - 1) as f64);
    let mut out = vec![0.0; k];
    for r in 0..h {
        for c in 0..w {
            let wy = (1.0 - (y - r as f64).abs()).max(0.0);
            let wx = (1.0 - (x - c as f64).abs()).max(0.0);
            if wy * wx == 0.0 {
                continue;
            }
            for (ch, o) in out.iter_mut().enumerate() {
                *o += wy * wx * map.data()[(r * w + c) * k + ch] as f64;
            }
        }
    }
    out
}

fn map_coords(cam: &CameraModel, u: f64, v: f64, map: &Tensor) -> Option<(f64, f64)> {
    let [ih, iw] = cam.image_size;
    let inside = u >= 0.0 && u < iw as f64 && v >= 0.0 && v < ih as f64;
    inside.then(|| {
        (
            v / ih as f64 * map.dims()[0] as f64 - 0.5,
            u / iw as f64 * map.dims()[1] as f64 - 0.5,
        )
    })
}

pub fn project_sample(pts: &[[f64; 3]], cam: &CameraModel, map: &Tensor) -> (Tensor, Vec<bool>) {
    let k = map.dims()[2];
    let mut out = Tensor::zeros(&[pts.len(), k]);
    let mut valid = vec![false; pts.len()];
    for (i, &p) in pts.iter().enumerate() {
        if let Some((u, v, _)) = pinhole(cam, p) {
            if let Some((y, x)) = map_coords(cam, u, v, map) {
                for (o, s) in out.row_mut(i).iter_mut().zip(bilinear(map, y, x)) {
                    *o = s as f32;
                }
                valid[i] = true;
            }
        }
    }
    (out, valid)
}

/// Every grid cell scored against every camera, in lexicographic coordinate
/// order, without a voxel cap.
pub fn safs_exhaustive(
    grid: &GridSpec,
    images: &[ImageFeatureSet],
    cams: &[CameraModel],
    bins: &DepthBinSpec,
    depth_thr: f32,
    sem_thr: f32,
) -> Vec<([u32; 3], Vec<f32>)> {
    let mut out = Vec::new();
    for x in 0..grid.extents[0] {
        for y in 0..grid.extents[1] {
            for z in 0..grid.extents[2] {
                let p: [f64; 3] = std::array::from_fn(|a| {
                    grid.origin[a] + ([x, y, z][a] as f64 + 0.5) * grid.voxel_size[a]
                });
                let mut best: Option<(f64, usize, f64, f64, f64)> = None;
                for (ci, cam) in cams.iter().enumerate() {
                    let Some((u, v, d)) = pinhole(cam, p) else { continue };
                    let Some((my, mx)) = map_coords(cam, u, v, &images[ci].semantic) else { continue };
                    let s = bilinear(&images[ci].semantic, my, mx)[0] as f32 as f64;
                    if best.map_or(true, |b| s > b.0) {
                        best = Some((s, ci, my, mx, d));
                    }
                }
                let Some((s, ci, my, mx, d)) = best else { continue };
                let width = (bins.d_max - bins.d_min) / bins.count as f64;
                let vd = if d >= bins.d_min && d < bins.d_max {
                    let k = (((d - bins.d_min) / width).floor() as usize).min(bins.count - 1);
                    bilinear(&images[ci].depth, my, mx)[k] as f32
                } else {
                    0.0
                };
                if s as f32 > sem_thr && vd > depth_thr {
                    let f = bilinear(&images[ci].feats, my, mx);
                    out.push(([x, y, z], f.iter().map(|&v| v as f32 * vd).collect()));
                }
            }
        }
    }
    out
}

/// Farthest point sampling recomputing every min-distance from scratch.
pub fn fps_greedy(pts: &[[f64; 3]], target: usize) -> Vec<usize> {
    let mut chosen = vec![0usize];
    while chosen.len() < target.min(pts.len()) {
        let mut best = (0, -1.0);
        for (i, p) in pts.iter().enumerate() {
            let m = chosen
                .iter()
                .map(|&j| (0..3).map(|a| (p[a] - pts[j][a]).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            if m > best.1 {
                best = (i, m);
            }
        }
        chosen.push(best.0);
    }
    chosen.truncate(target);
    chosen
}

fn splat_contributions(
    images: &[ImageFeatureSet],
    cams: &[CameraModel],
    bins: &DepthBinSpec,
    grid: &GridSpec,
    mut f: impl FnMut(usize, usize, Vec<f64>),
) {
    for (img, cam) in images.iter().zip(cams) {
        let (h, w, c) = (img.feats.dims()[0], img.feats.dims()[1], img.feats.dims()[2]);
        for r in 0..h {
            for col in 0..w {
                let u = (col as f64 + 0.5) / w as f64 * cam.image_size[1] as f64;
                let v = (r as f64 + 0.5) / h as f64 * cam.image_size[0] as f64;
                for k in 0..bins.count {
                    let d = bins.d_min + (k as f64 + 0.5) * (bins.d_max - bins.d_min) / bins.count as f64;
                    let p = back_project(cam, u, v, d);
                    let ix = ((p[0] - grid.origin[0]) / grid.voxel_size[0]).floor();
                    let iy = ((p[1] - grid.origin[1]) / grid.voxel_size[1]).floor();
                    let iz = ((p[2] - grid.origin[2]) / grid.voxel_size[2]).floor();
                    let inside = ix >= 0.0
                        && iy >= 0.0
                        && iz >= 0.0
                        && ix < grid.extents[0] as f64
                        && iy < grid.extents[1] as f64
                        && iz < grid.extents[2] as f64;
                    if !inside {
                        continue;
                    }
                    let prob = img.depth.data()[(r * w + col) * bins.count + k] as f64;
                    let vals = (0..c).map(|ch| img.feats.data()[(r * w + col) * c + ch] as f64 * prob).collect();
                    f(iy as usize, ix as usize, vals);
                }
            }
        }
    }
}

/// Lift-splat by explicit per-pixel, per-bin back-projection into an
/// `(Ny, Nx, C)` raster.
pub fn splat_naive(images: &[ImageFeatureSet], cams: &[CameraModel], bins: &DepthBinSpec, grid: &GridSpec) -> Tensor {
    let c = images.first().map_or(0, |i| i.feats.dims()[2]);
    let (ny, nx) = (grid.extents[1] as usize, grid.extents[0] as usize);
    let mut acc = vec![0f64; ny * nx * c];
    splat_contributions(images, cams, bins, grid, |r, col, vals| {
        for (ch, v) in vals.into_iter().enumerate() {
            acc[(r * nx + col) * c + ch] += v;
        }
    });
    Tensor::new(vec![ny, nx, c], acc.into_iter().map(|v| v as f32).collect()).unwrap()
}

/// Total feature mass of all frustum points falling inside the grid.
pub fn splat_in_range_mass(images: &[ImageFeatureSet], cams: &[CameraModel], bins: &DepthBinSpec, grid: &GridSpec) -> f64 {
    let mut total = 0.0;
    splat_contributions(images, cams, bins, grid, |_, _, vals| total += vals.iter().sum::<f64>());
    total
}

/// Merge order by insertion sort with an explicit comparator on
/// `(curve key, modality, row)`; returns `(is_image, row)` per position.
pub fn merge_order(lidar: &[[u32; 3]], image: &[[u32; 3]], bits: u32) -> Vec<(bool, usize)> {
    let key = |c: [u32; 3]| crate::curve::hilbert_index(c[0], c[1], c[2], bits).unwrap();
    let mut items: Vec<(u64, bool, usize)> = lidar
        .iter()
        .enumerate()
        .map(|(i, c)| (key([c[0], c[1], 2 * c[2]]), false, i))
        .chain(image.iter().enumerate().map(|(i, &c)| (key(c), true, i)))
        .collect();
    for i in 1..items.len() {
        let mut j = i;
        while j > 0 && items[j - 1] > items[j] {
            items.swap(j - 1, j);
            j -= 1;
        }
    }
    items.into_iter().map(|(_, t, i)| (t, i)).collect()
}

/// Densifies `v` and evaluates a zero-padded stride-2 3x3x3 convolution
/// followed by SiLU at every output position of the halved grid.
pub fn conv3d_stride2_dense(
    v: &SparseVoxelSet,
    weight: &Tensor,
    bias: &[f32],
) -> std::collections::HashMap<(usize, usize, usize), Vec<f32>> {
    let [nx, ny, nz] = v.grid.extents.map(|e| e as usize);
    let (cout, cin) = (weight.dims()[3], weight.dims()[4]);
    let mut dense = vec![0f64; nx * ny * nz * cin];
    for (i, c) in v.coords.iter().enumerate() {
        let base = ((c[0] as usize * ny + c[1] as usize) * nz + c[2] as usize) * cin;
        for ch in 0..cin {
            dense[base + ch] = v.feats.data()[i * cin + ch] as f64;
        }
    }
    let mut out = std::collections::HashMap::new();
    for ox in 0..nx.div_ceil(2) {
        for oy in 0..ny.div_ceil(2) {
            for oz in 0..nz.div_ceil(2) {
                let mut acc: Vec<f64> = bias.iter().map(|&b| b as f64).collect();
                for kx in 0..3 {
                    for ky in 0..3 {
                        for kz in 0..3 {
                            let (x, y, z) = (2 * ox + kx, 2 * oy + ky, 2 * oz + kz);
                            if x == 0 || y == 0 || z == 0 || x > nx || y > ny || z > nz {
                                continue;
                            }
                            let base = (((x - 1) * ny + (y - 1)) * nz + (z - 1)) * cin;
                            let kb = ((kx * 3 + ky) * 3 + kz) * cout * cin;
                            for (o, a) in acc.iter_mut().enumerate() {
                                for ch in 0..cin {
                                    *a += weight.data()[kb + o * cin + ch] as f64 * dense[base + ch];
                                }
                            }
                        }
                    }
                }
                let act = acc.into_iter().map(|a| (a / (1.0 + (-a).exp())) as f32).collect();
                out.insert((ox, oy, oz), act);
            }
        }
    }
    out
}

/// Number of fine coordinates whose parent cell appears in `coarse`.
pub fn children_present(coarse: &[[u32; 3]], fine: &[[u32; 3]]) -> usize {
    fine.iter()
        .filter(|f| coarse.iter().any(|c| (0..3).all(|a| f[a] >= 2 * c[a] && f[a] < 2 * c[a] + 2)))
        .count()
}

/// Pillar-wise max by scanning every voxel for every pillar.
pub fn height_compress(v: &SparseVoxelSet) -> Tensor {
    let (nx, ny) = (v.grid.extents[0] as usize, v.grid.extents[1] as usize);
    let c = v.feats.cols();
    let mut out = Tensor::zeros(&[ny, nx, c]);
    for y in 0..ny {
        for x in 0..nx {
            let members: Vec<usize> =
                (0..v.coords.len()).filter(|&i| v.coords[i][0] as usize == x && v.coords[i][1] as usize == y).collect();
            for ch in 0..c {
                let m = members.iter().map(|&i| v.feats.data()[i * c + ch]).fold(f32::NEG_INFINITY, f32::max);
                if !members.is_empty() {
                    out.data_mut()[(y * nx + x) * c + ch] = m;
                }
            }
        }
    }
    out
}

fn lin(l: &Linear, x: &[f64]) -> Vec<f64> {
    let (o, i) = (l.weight.dims()[0], l.weight.dims()[1]);
    (0..o).map(|r| l.bias[r] as f64 + (0..i).map(|k| l.weight.data()[r * i + k] as f64 * x[k]).sum::<f64>()).collect()
}

fn ln(x: &[f64], n: &Norm) -> Vec<f64> {
    let len = x.len() as f64;
    let m = x.iter().sum::<f64>() / len;
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / len;
    x.iter().enumerate().map(|(k, v)| (v - m) / (var + 1e-5).sqrt() * n.scale[k] as f64 + n.shift[k] as f64).collect()
}

fn swish(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn soft_plus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

/// Sequential diagonal scan with `D = 1`; `bcd[i] = (B_i, C_i, Δ_i)`.
fn scan_seq(z: &[Vec<f64>], a: &Tensor, bcd: &[(Vec<f64>, Vec<f64>, Vec<f64>)]) -> Vec<Vec<f64>> {
    let (ch, ns) = (a.dims()[0], a.dims()[1]);
    let mut h = vec![vec![0.0; ns]; ch];
    let mut out = Vec::new();
    for (i, zi) in z.iter().enumerate() {
        let (b, c, d) = &bcd[i];
        let mut yi = vec![0.0; ch];
        for k in 0..ch {
            for s in 0..ns {
                let av = a.data()[k * ns + s] as f64;
                let da = d[k] * av;
                h[k][s] = da.exp() * h[k][s] + d[k] * (da.exp() - 1.0) / da * b[s] * zi[k];
                yi[k] += c[s] * h[k][s];
            }
            yi[k] += zi[k];
        }
        out.push(yi);
    }
    out
}

fn four_orders(h: usize, w: usize) -> [Vec<usize>; 4] {
    let mut row = Vec::new();
    for r in 0..h {
        for c in 0..w {
            row.push(r * w + c);
        }
    }
    let mut col = Vec::new();
    for c in 0..w {
        for r in 0..h {
            col.push(r * w + c);
        }
    }
    let mut row_rev = row.clone();
    row_rev.reverse();
    let mut col_rev = col.clone();
    col_rev.reverse();
    [row, row_rev, col, col_rev]
}

fn map_cells(t: &Tensor) -> Vec<Vec<f64>> {
    let c = t.dims()[2];
    t.data().chunks(c).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

/// Runs four direction scans of `z`, normalizes, and sums per cell.
fn ss2d_scalar(
    z: &[Vec<f64>],
    h: usize,
    w: usize,
    dirs: &[DirectionWeights; 4],
    bcd_of: impl Fn(usize, usize) -> (Vec<f64>, Vec<f64>, Vec<f64>),
) -> Vec<Vec<f64>> {
    let ch = z[0].len();
    let mut sum = vec![vec![0.0; ch]; z.len()];
    for (d, order) in four_orders(h, w).iter().enumerate() {
        let seq: Vec<Vec<f64>> = order.iter().map(|&cell| z[cell].clone()).collect();
        let bcd: Vec<_> = (0..order.len()).map(|i| bcd_of(d, order[i])).collect();
        let y = scan_seq(&seq, &dirs[d].a, &bcd);
        for (i, &cell) in order.iter().enumerate() {
            for (s, v) in sum[cell].iter_mut().zip(ln(&y[i], &dirs[d].out_norm)) {
                *s += v;
            }
        }
    }
    sum
}

pub fn ib_mamba_scalar(x: &Tensor, wt: &IbMambaWeights) -> Tensor {
    let (h, w) = (x.dims()[0], x.dims()[1]);
    let (n, c) = (wt.d_state, wt.channels);
    let cells = map_cells(x);
    let u: Vec<Vec<f64>> = cells.iter().map(|r| ln(r, &wt.norm)).collect();
    let z: Vec<Vec<f64>> = u.iter().map(|r| lin(&wt.in_proj, r)).collect();
    let sum = ss2d_scalar(&z, h, w, &wt.dirs, |d, cell| {
        let raw = lin(&wt.param_gen[d], &z[cell]);
        let delta = (0..c).map(|k| soft_plus(raw[2 * n + k] + wt.dirs[d].dt_bias[k] as f64)).collect();
        (raw[..n].to_vec(), raw[n..2 * n].to_vec(), delta)
    });
    let mut out = Vec::new();
    for cell in 0..h * w {
        let g = lin(&wt.y_gate, &u[cell]);
        let m: Vec<f64> = (0..c).map(|k| sum[cell][k] * swish(g[k])).collect();
        let o = lin(&wt.out_proj, &m);
        out.extend((0..c).map(|k| (o[k] + cells[cell][k]) as f32));
    }
    Tensor::new(vec![h, w, c], out).unwrap()
}

/// Cross-modal block written cell by cell: joint parameters `T`, the split
/// into per-modality per-direction `(B, C, Δ)`, two four-direction scans,
/// and the complementary gates.
pub fn cb_mamba_scalar(img: &Tensor, lidar: &Tensor, wt: &CbMambaWeights) -> Tensor {
    let (h, w) = (img.dims()[0], img.dims()[1]);
    let (n, c) = (wt.d_state, wt.channels);
    let (ci, cl) = (map_cells(img), map_cells(lidar));
    let t: Vec<Vec<f64>> = (0..h * w)
        .map(|cell| {
            let f: Vec<f64> = ci[cell].iter().chain(&cl[cell]).copied().collect();
            let hid: Vec<f64> = lin(&wt.conv1, &f)
                .iter()
                .enumerate()
                .map(|(k, &v)| {
                    let bn = &wt.bn;
                    let normed = (v - bn.mean[k] as f64) / (bn.var[k] as f64 + 1e-5).sqrt() * bn.gamma[k] as f64
                        + bn.beta[k] as f64;
                    swish(normed)
                })
                .collect();
            lin(&wt.conv2, &hid)
        })
        .collect();
    let branch = |cells: &[Vec<f64>], br: &CbBranch, m: usize| {
        let z: Vec<Vec<f64>> = cells.iter().map(|r| lin(&br.in_proj, &ln(r, &br.norm))).collect();
        let off = m * (8 * n + 4 * c);
        let sum = ss2d_scalar(&z, h, w, &br.dirs, |d, cell| {
            let r = &t[cell];
            let b = r[off + d * n..off + (d + 1) * n].to_vec();
            let cc = r[off + 4 * n + d * n..off + 4 * n + (d + 1) * n].to_vec();
            let delta = (0..c).map(|k| soft_plus(r[off + 8 * n + d * c + k] + br.dirs[d].dt_bias[k] as f64)).collect();
            (b, cc, delta)
        });
        sum.iter().map(|s| lin(&br.out_proj, s)).collect::<Vec<_>>()
    };
    let si = branch(&ci, &wt.image, 0);
    let sl = branch(&cl, &wt.lidar, 1);
    let mut out = Vec::new();
    for cell in 0..h * w {
        let yi: Vec<f64> = lin(&wt.gate, &t[cell]).into_iter().map(swish).collect();
        for k in 0..c {
            let v = yi[k] * si[cell][k] + (1.0 - yi[k]) * sl[cell][k] + 0.5 * (ci[cell][k] + cl[cell][k]);
            out.push(v as f32);
        }
    }
    Tensor::new(vec![h, w, c], out).unwrap()
}

/// Local maxima against a `-inf`-padded 3x3 window, stably sorted by score.
pub fn nms_topk(h: &Tensor, k: usize) -> Vec<(usize, usize, usize)> {
    let (nk, nh, nw) = (h.dims()[0], h.dims()[1], h.dims()[2]);
    let at = |c: usize, r: i64, col: i64| {
        if r < 0 || col < 0 || r >= nh as i64 || col >= nw as i64 {
            f32::NEG_INFINITY
        } else {
            h.data()[(c * nh + r as usize) * nw + col as usize]
        }
    };
    let mut found = Vec::new();
    for c in 0..nk {
        for r in 0..nh {
            for col in 0..nw {
                let v = at(c, r as i64, col as i64);
                let mut m = f32::NEG_INFINITY;
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        m = m.max(at(c, r as i64 + dr, col as i64 + dc));
                    }
                }
                if v == m {
                    found.push((v, (c, r, col)));
                }
            }
        }
    }
    found.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    found.into_iter().take(k).map(|(_, p)| p).collect()
}

/// Mask by testing every cell against every position in Chebyshev distance.
pub fn dilation_mask(positions: &[(usize, usize)], h: usize, w: usize, kernel: usize) -> Vec<u8> {
    let r = (kernel / 2) as i64;
    let mut out = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let hit = positions
                .iter()
                .any(|&(pr, pc)| (row as i64 - pr as i64).abs() <= r && (col as i64 - pc as i64).abs() <= r);
            out.push(u8::from(!hit));
        }
    }
    out
}

fn attend(att: &Attention, q: &[Vec<f64>], kv: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let qs: Vec<Vec<f64>> = q.iter().map(|x| lin(&att.q, x)).collect();
    let ks: Vec<Vec<f64>> = kv.iter().map(|x| lin(&att.k, x)).collect();
    let vs: Vec<Vec<f64>> = kv.iter().map(|x| lin(&att.v, x)).collect();
    let d = qs.first().map_or(1, |v| v.len()) as f64;
    qs.iter()
        .map(|qi| {
            let logits: Vec<f64> =
                ks.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut mixed = vec![0.0; vs[0].len()];
            for (j, v) in vs.iter().enumerate() {
                for (m, x) in mixed.iter_mut().zip(v) {
                    *m += e[j] / z * x;
                }
            }
            lin(&att.o, &mixed)
        })
        .collect()
}

fn pos_enc(row: f64, col: f64) -> Vec<f64> {
    let mut out = vec![0.0; 16];
    for k in 0..4 {
        let f = 100f64.powf(-(k as f64) / 4.0);
        out[2 * k] = (row * f).sin();
        out[2 * k + 1] = (row * f).cos();
        out[8 + 2 * k] = (col * f).sin();
        out[8 + 2 * k + 1] = (col * f).cos();
    }
    out
}

fn conv3x3(x: &[Vec<f64>], h: usize, w: usize, conv: &crate::nn::Conv2d) -> Vec<Vec<f64>> {
    let (cout, cin) = (conv.weight.dims()[0], conv.weight.dims()[3]);
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let mut acc: Vec<f64> = conv.bias.iter().map(|&b| b as f64).collect();
            for ky in 0..3 {
                for kx in 0..3 {
                    let (rr, cc) = (r as i64 + ky as i64 - 1, c as i64 + kx as i64 - 1);
                    if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                        continue;
                    }
                    let src = &x[rr as usize * w + cc as usize];
                    for (o, a) in acc.iter_mut().enumerate() {
                        for i in 0..cin {
                            *a += conv.weight.data()[((o * 3 + ky) * 3 + kx) * cin + i] as f64 * src[i];
                        }
                    }
                }
            }
            debug_assert_eq!(acc.len(), cout);
            out.push(acc);
        }
    }
    out
}

pub fn hia_scalar(queries: &[Query], b: &Tensor, wt: &HiaWeights) -> Tensor {
    let (h, w, c) = (b.dims()[0], b.dims()[1], b.dims()[2]);
    let cells = map_cells(b);
    let classes = wt.cls_embed.in_dim();
    let e: Vec<Vec<f64>> = queries
        .iter()
        .map(|q| {
            let onehot: Vec<f64> = (0..classes).map(|k| f64::from(u8::from(k == q.class_id))).collect();
            let ce = lin(&wt.cls_embed, &onehot);
            let pe = lin(&wt.pos_embed, &pos_enc(q.row as f64, q.col as f64));
            (0..c).map(|k| q.feature[k] as f64 + ce[k] + pe[k]).collect()
        })
        .collect();
    let sa = attend(&wt.self_attn, &e, &e);
    let e2: Vec<Vec<f64>> = e.iter().zip(&sa).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
    let xq: Vec<Vec<f64>> = (0..h * w)
        .map(|cell| {
            let pe = lin(&wt.pos_embed, &pos_enc((cell / w) as f64, (cell % w) as f64));
            cells[cell].iter().zip(pe).map(|(a, b)| a + b).collect()
        })
        .collect();
    let act = attend(&wt.cross_attn, &xq, &e2);
    let x: Vec<Vec<f64>> = cells.iter().zip(&act).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
    let h1: Vec<Vec<f64>> = conv3x3(&x, h, w, &wt.block.conv1).into_iter().map(|r| r.into_iter().map(swish).collect()).collect();
    let h2 = conv3x3(&h1, h, w, &wt.block.conv2);
    let out = x.iter().zip(h2).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x + y) as f32).collect::<Vec<_>>()).collect();
    Tensor::new(vec![h, w, c], out).unwrap()
}

/// Undoes the box rotation and translation and scales by the box size.
pub fn to_box_frame(p: &[f64; 3], b: &ProposalBox) -> [f64; 3] {
    let (dx, dy, dz) = (p[0] - b.center[0], p[1] - b.center[1], p[2] - b.center[2]);
    let (s, c) = b.yaw.sin_cos();
    [(dx * c + dy * s) / b.size[0], (-dx * s + dy * c) / b.size[1], dz / b.size[2]]
}

/// Neighborhood average by testing every voxel against every point.
pub fn voxel_pool(v: &SparseVoxelSet, points: &[[f64; 3]]) -> Tensor {
    let c = v.feats.cols();
    let mut out = Tensor::zeros(&[points.len(), c]);
    for (i, p) in points.iter().enumerate() {
        let cell: Vec<i64> = (0..3).map(|a| ((p[a] - v.grid.origin[a]) / v.grid.voxel_size[a]).floor() as i64).collect();
        let mut sum = vec![0.0; c];
        let mut n = 0;
        for (j, vc) in v.coords.iter().enumerate() {
            let d: i64 = (0..3).map(|a| (vc[a] as i64 - cell[a]).abs()).sum();
            if d <= 1 {
                n += 1;
                for k in 0..c {
                    sum[k] += v.feats.data()[j * c + k] as f64;
                }
            }
        }
        if n > 0 {
            for k in 0..c {
                out.data_mut()[i * c + k] = (sum[k] / n as f64) as f32;
            }
        }
    }
    out
}

/// Channel then spatial mixing written as explicit index sums.
pub fn mix_scalar(q: &[f32], feats: &Tensor, offsets: &[[f64; 3]], w: &MixWeights) -> Vec<f32> {
    let (g, c) = (feats.dims()[0], feats.dims()[1]);
    let s = g / 4;
    let qd: Vec<f64> = q.iter().map(|&v| v as f64).collect();
    let ck = lin(&w.channel_gen, &qd);
    let sk = lin(&w.spatial_gen, &qd);
    let fg: Vec<Vec<f64>> = (0..g)
        .map(|i| {
            let e = lin(&w.offset_embed, &offsets[i].map(|v| v as f32 as f64));
            (0..c).map(|k| feats.data()[i * c + k] as f64 + e[k]).collect()
        })
        .collect();
    let mut flat = Vec::with_capacity(c * s);
    for ch in 0..c {
        for j in 0..s {
            let mut acc = 0.0;
            for i in 0..g {
                let f1: f64 = (0..c).map(|a| fg[i][a] * ck[a * c + ch]).sum();
                acc += f1 * sk[i * s + j];
            }
            flat.push(acc);
        }
    }
    lin(&w.down, &flat).into_iter().map(|v| v as f32).collect()
}

pub fn deformable_scalar(q: &Tensor, cells: &[(usize, usize)], b: &Tensor, w: &DeformableLayer) -> Tensor {
    let (h, wd, c) = (b.dims()[0], b.dims()[1], b.dims()[2]);
    let vals: Vec<Vec<f64>> = map_cells(b).iter().map(|x| lin(&w.value, x)).collect();
    let vmap = Tensor::new(vec![h, wd, c], vals.iter().flatten().map(|&v| v as f32).collect()).unwrap();
    let mut out = Vec::new();
    for (i, &(r, col)) in cells.iter().enumerate() {
        let qi: Vec<f64> = q.row(i).iter().map(|&v| v as f64).collect();
        let off = lin(&w.offsets, &qi);
        let logits = lin(&w.weights, &qi);
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let mut agg = vec![0.0; c];
        for s in 0..logits.len() {
            let sample = bilinear(&vmap, r as f64 + off[2 * s] as f32 as f64, col as f64 + off[2 * s + 1] as f32 as f64);
            for k in 0..c {
                agg[k] += logits[s].exp() / z * sample[k];
            }
        }
        let o = lin(&w.out, &agg);
        let x: Vec<f64> = (0..c).map(|k| o[k] + qi[k]).collect();
        let hid: Vec<f64> = lin(&w.ffn.up, &x).into_iter().map(swish).collect();
        let y = lin(&w.ffn.down, &hid);
        out.extend((0..c).map(|k| (y[k] + x[k]) as f32));
    }
    Tensor::new(vec![cells.len(), c], out).unwrap()
}

/// Straight-line evaluator: exhaustive scan of GTs per ranked detection,
/// and interpolated precision as a max over every ranked prefix.
pub fn eval_reference(
    dets: &[DetectionBox],
    gt: &[crate::scene::GtBox],
) -> std::collections::BTreeMap<usize, [f64; 4]> {
    let mut out = std::collections::BTreeMap::new();
    for g0 in gt {
        let class = g0.class;
        if out.contains_key(&class) {
            continue;
        }
        let gts: Vec<[f64; 3]> = gt.iter().filter(|g| g.class == class).map(|g| g.center).collect();
        let mut ds: Vec<(f64, usize, [f64; 3])> = Vec::new();
        for (i, d) in dets.iter().enumerate() {
            if d.class_id == class {
                ds.push((d.score, i, d.center));
            }
        }
        // Stable insertion sort, score descending.
        for i in 1..ds.len() {
            let mut j = i;
            while j > 0 && ds[j - 1].0 < ds[j].0 {
                ds.swap(j - 1, j);
                j -= 1;
            }
        }
        let mut aps = [0.0; 4];
        for (t, &thr) in [0.5, 1.0, 2.0, 4.0].iter().enumerate() {
            let mut used = vec![false; gts.len()];
            let mut tp = Vec::new();
            for d in &ds {
                let mut best: Option<(f64, usize)> = None;
                for (j, g) in gts.iter().enumerate() {
                    let dist = ((d.2[0] - g[0]).powi(2) + (d.2[1] - g[1]).powi(2)).sqrt();
                    if used[j] || dist > thr {
                        continue;
                    }
                    if best.is_none() || dist < best.unwrap().0 {
                        best = Some((dist, j));
                    }
                }
                if let Some((_, j)) = best {
                    used[j] = true;
                }
                tp.push(best.is_some());
            }
            let mut sum = 0.0;
            for i in 0..=100 {
                let r = i as f64 / 100.0;
                let mut p_max = 0.0f64;
                for k in 0..tp.len() {
                    let hits = tp[..=k].iter().filter(|&&x| x).count() as f64;
                    if hits / gts.len() as f64 >= r - 1e-12 {
                        p_max = p_max.max(hits / (k + 1) as f64);
                    }
                }
                sum += p_max;
            }
            aps[t] = sum / 101.0;
        }
        out.insert(class, aps);
    }
    out
}

/// Sums the four directional sequences into the map, locating each cell's
/// position in every unfolding by linear search.
pub fn cross_merge(outputs: &[Tensor; 4], h: usize, w: usize) -> Tensor {
    let c = outputs[0].cols();
    let orders = four_orders(h, w);
    let mut out = Tensor::zeros(&[h, w, c]);
    for cell in 0..h * w {
        for d in 0..4 {
            let pos = orders[d].iter().position(|&x| x == cell).unwrap();
            for k in 0..c {
                out.data_mut()[cell * c + k] += outputs[d].data()[pos * c + k];
            }
        }
    }
    out
}

/// The curve walk for `bits`, found by inverting the forward index over
/// every cell of the cube. Each entry is the cell and its L1 step from the
/// previous cell (0 for the first).
pub fn hilbert_walk(bits: u32) -> Vec<([u32; 3], u32)> {
    let side = 1u32 << bits;
    let n = (side as usize).pow(3);
    let mut at = vec![None; n];
    for x in 0..side {
        for y in 0..side {
            for z in 0..side {
                let i = crate::curve::hilbert_index(x, y, z, bits).unwrap() as usize;
                assert!(at[i].is_none(), "index {i} reached twice");
                at[i] = Some([x, y, z]);
            }
        }
    }
    let mut walk = Vec::with_capacity(n);
    let mut prev: Option<[u32; 3]> = None;
    for p in at {
        let p = p.expect("index never reached");
        let step = prev.map_or(0, |q| (0..3).map(|a| p[a].abs_diff(q[a])).sum());
        walk.push((p, step));
        prev = Some(p);
    }
    walk
}
