//! Dense building blocks shared by every stage.

use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::rng::ParamInit;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// `ln(1 + e^x)` without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Normalizes one feature row and applies a per-channel affine.
pub fn layer_norm_row(x: &[f32], scale: &[f32], shift: &[f32], out: &mut [f32]) {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (((x[i] as f64 - mean) * inv) * scale[i] as f64 + shift[i] as f64) as f32;
    }
}

/// Row-wise layer norm over the last axis.
pub fn layer_norm(x: &Tensor, norm: &Norm) -> Tensor {
    let mut out = x.clone();
    let c = x.cols();
    if c == 0 {
        return out;
    }
    out.data_mut()
        .par_chunks_mut(c)
        .zip(x.data().par_chunks(c))
        .for_each(|(o, r)| layer_norm_row(r, &norm.scale, &norm.shift, o));
    out
}

/// Per-channel scale and shift of a normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
}

impl Norm {
    pub fn new(channels: usize) -> Self {
        Self { scale: vec![1.0; channels], shift: vec![0.0; channels] }
    }
}

/// Affine map `y = W x + b` with `W` stored `(out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn init(p: &ParamInit, name: &str, out_dim: usize, in_dim: usize) -> Self {
        let weight = p.tensor(&format!("{name}.weight"), &[out_dim, in_dim]);
        let bias = p.tensor(&format!("{name}.bias"), &[out_dim]).into_data();
        Self { weight, bias }
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self { weight: Tensor::zeros(&[out_dim, in_dim]), bias: vec![0.0; out_dim] }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn zero(&mut self) {
        self.weight.data_mut().fill(0.0);
        self.bias.fill(0.0);
    }

    pub fn apply(&self, x: &[f32], out: &mut [f32]) {
        debug_assert_eq!(x.len(), self.in_dim());
        for (o, (w, b)) in out.iter_mut().zip(self.weight.data().chunks_exact(self.in_dim()).zip(&self.bias)) {
            *o = (dot(w, x) + *b as f64) as f32;
        }
    }

    pub fn apply_vec(&self, x: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; self.out_dim()];
        self.apply(x, &mut out);
        out
    }

    /// Applies the map to every row of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ensure!(
            x.cols() == self.in_dim(),
            Shape,
            "linear expects width {}, got {:?}",
            self.in_dim(),
            x.dims()
        );
        let rows = x.rows();
        let mut dims = x.dims().to_vec();
        *dims.last_mut().unwrap() = self.out_dim();
        let mut out = Tensor::zeros(&dims);
        if rows == 0 || self.out_dim() == 0 {
            return Ok(out);
        }
        let (ic, oc) = (self.in_dim(), self.out_dim());
        out.data_mut()
            .par_chunks_mut(oc)
            .zip(x.data().par_chunks(ic))
            .for_each(|(o, r)| self.apply(r, o));
        Ok(out)
    }
}

/// Square 2D convolution over `(H, W, C)` maps, weights `(out, k, k, in)`,
/// zero padding `k / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

impl Conv2d {
    pub fn init(p: &ParamInit, name: &str, out_dim: usize, in_dim: usize, k: usize) -> Self {
        let weight = p.tensor(&format!("{name}.weight"), &[out_dim, k, k, in_dim]);
        let bias = p.tensor(&format!("{name}.bias"), &[out_dim]).into_data();
        Self { weight, bias }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[3]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn zero(&mut self) {
        self.weight.data_mut().fill(0.0);
        self.bias.fill(0.0);
    }

    pub fn forward(&self, x: &Tensor, stride: usize) -> Result<Tensor> {
        ensure!(
            x.dims().len() == 3 && x.dims()[2] == self.in_dim(),
            Shape,
            "conv expects (H, W, {}), got {:?}",
            self.in_dim(),
            x.dims()
        );
        let (h, w, ci) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let k = self.kernel();
        let pad = k / 2;
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let co = self.out_dim();
        let mut out = Tensor::zeros(&[oh, ow, co]);
        if oh * ow * co == 0 {
            return Ok(out);
        }
        let wt = self.weight.data();
        out.data_mut().par_chunks_mut(ow * co).enumerate().for_each(|(r, orow)| {
            let mut acc = vec![0f64; co];
            for c in 0..ow {
                for (o, a) in acc.iter_mut().enumerate() {
                    *a = self.bias[o] as f64;
                }
                for ky in 0..k {
                    let y = (r * stride + ky) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let xx = (c * stride + kx) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let px = &x.data()[(y as usize * w + xx as usize) * ci..][..ci];
                        for (o, a) in acc.iter_mut().enumerate() {
                            let wk = &wt[((o * k + ky) * k + kx) * ci..][..ci];
                            *a += dot(wk, px);
                        }
                    }
                }
                for o in 0..co {
                    orow[c * co + o] = acc[o] as f32;
                }
            }
        });
        Ok(out)
    }
}

/// `x + conv2(SiLU(conv1(x)))` with 3x3 kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn init(p: &ParamInit, channels: usize) -> Self {
        Self {
            conv1: Conv2d::init(p, "conv1", channels, channels, 3),
            conv2: Conv2d::init(p, "conv2", channels, channels, 3),
        }
    }

    pub fn make_identity(&mut self) {
        self.conv2.zero();
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.conv1.forward(x, 1)?;
        h.data_mut().iter_mut().for_each(|v| *v = silu(*v));
        let mut out = self.conv2.forward(&h, 1)?;
        for (o, &i) in out.data_mut().iter_mut().zip(x.data()) {
            *o += i;
        }
        Ok(out)
    }
}

/// Single-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub fn init(p: &ParamInit, q_dim: usize, kv_dim: usize, dim: usize) -> Self {
        Self {
            q: Linear::init(p, "q", dim, q_dim),
            k: Linear::init(p, "k", dim, kv_dim),
            v: Linear::init(p, "v", dim, kv_dim),
            o: Linear::init(p, "o", q_dim, dim),
        }
    }

    /// Softmax attention weights `(n_q, n_k)` from already-projected rows.
    pub fn weights_projected(q: &Tensor, k: &Tensor) -> Tensor {
        let (nq, nk, d) = (q.rows(), k.rows(), q.cols());
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = Tensor::zeros(&[nq, nk]);
        if nk == 0 {
            return out;
        }
        out.data_mut().par_chunks_mut(nk).enumerate().for_each(|(i, row)| {
            let mut logits: Vec<f64> = (0..nk).map(|j| dot(q.row(i), k.row(j)) * scale).collect();
            softmax_in_place(&mut logits);
            for (r, l) in row.iter_mut().zip(logits) {
                *r = l as f32;
            }
        });
        out
    }

    pub fn weights(&self, queries: &Tensor, keys: &Tensor) -> Result<Tensor> {
        Ok(Self::weights_projected(&self.q.forward(queries)?, &self.k.forward(keys)?))
    }

    /// `o(softmax(q k^T / sqrt(d)) v)`; no residual.
    pub fn forward(&self, queries: &Tensor, keys: &Tensor) -> Result<Tensor> {
        let q = self.q.forward(queries)?;
        self.forward_projected(&q, keys)
    }

    pub fn forward_projected(&self, q: &Tensor, keys: &Tensor) -> Result<Tensor> {
        let k = self.k.forward(keys)?;
        let v = self.v.forward(keys)?;
        let att = Self::weights_projected(q, &k);
        let (nq, nk, d) = (q.rows(), k.rows(), v.cols());
        let mut mixed = Tensor::zeros(&[nq, d]);
        if nk > 0 {
            mixed.data_mut().par_chunks_mut(d).enumerate().for_each(|(i, row)| {
                let a = att.row(i);
                for j in 0..nk {
                    let w = a[j];
                    for (r, &vv) in row.iter_mut().zip(v.row(j)) {
                        *r += w * vv;
                    }
                }
            });
        }
        self.o.forward(&mixed)
    }

    /// `x + attention(x, x)`.
    pub fn self_residual(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.forward(x, x)?;
        for (o, &i) in y.data_mut().iter_mut().zip(x.data()) {
            *o += i;
        }
        Ok(y)
    }
}

/// Two-layer SiLU feed-forward with residual.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn init(p: &ParamInit, dim: usize, hidden: usize) -> Self {
        Self { up: Linear::init(p, "up", hidden, dim), down: Linear::init(p, "down", dim, hidden) }
    }

    pub fn forward_residual(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.up.forward(x)?;
        h.data_mut().iter_mut().for_each(|v| *v = silu(*v));
        let mut y = self.down.forward(&h)?;
        for (o, &i) in y.data_mut().iter_mut().zip(x.data()) {
            *o += i;
        }
        Ok(y)
    }
}

/// Bilinear sample of an `(h, w, k)` map at fractional `(y, x)`, where cell
/// centers sit at integer positions; neighbors are clamped to the border.
pub fn sample_bilinear(map: &Tensor, y: f64, x: f64, out: &mut [f64]) {
    let (h, w, k) = (map.dims()[0], map.dims()[1], map.dims()[2]);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let px = |r: usize, c: usize| &map.data()[(r * w + c) * k..][..k];
    let taps = [
        (px(y0, x0), (1.0 - fy) * (1.0 - fx)),
        (px(y0, x1), (1.0 - fy) * fx),
        (px(y1, x0), fy * (1.0 - fx)),
        (px(y1, x1), fy * fx),
    ];
    out.fill(0.0);
    for (p, wt) in taps {
        if wt == 0.0 {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(p) {
            *o += wt * v as f64;
        }
    }
}

/// Concatenates matrices with equal row counts along the last axis.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let rows = parts.first().map(|t| t.rows()).unwrap_or(0);
    ensure!(parts.iter().all(|t| t.rows() == rows), Shape, "concat of mismatched row counts");
    let width: usize = parts.iter().map(|t| t.cols()).sum();
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for t in parts {
            data.extend_from_slice(t.row(r));
        }
    }
    let mut dims = parts.first().map(|t| t.dims().to_vec()).unwrap_or_else(|| vec![0, 0]);
    *dims.last_mut().unwrap() = width;
    Tensor::new(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activations() {
        assert_eq!(silu(0.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((softplus(inverse_softplus(0.05)) - 0.05).abs() < 1e-12);
        assert!((softplus(30.0) - 30.0).abs() < 1e-9);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let p = ParamInit::new(3);
        let conv = Conv2d::init(&p, "c", 2, 3, 3);
        let x = p.tensor("x", &[5, 4, 3]);
        let y = conv.forward(&x, 2).unwrap();
        assert_eq!(y.dims(), &[3, 2, 2]);
        // output (1, 1) centered on input (2, 2)
        let mut want = 0.0f64;
        for ky in 0..3 {
            for kx in 0..3 {
                for c in 0..3 {
                    let xi = x.data()[((1 + ky) * 4 + (1 + kx)) * 3 + c] as f64;
                    let wi = conv.weight.data()[((ky) * 3 + kx) * 3 + c] as f64;
                    want += xi * wi;
                }
            }
        }
        let got = y.data()[(2 + 1) * 2] as f64;
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let p = ParamInit::new(9);
        let att = Attention::init(&p, 4, 4, 4);
        let x = p.tensor("x", &[6, 4]);
        let w = att.weights(&x, &x).unwrap();
        for i in 0..6 {
            let s: f32 = w.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_zero_mean() {
        let x = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let y = layer_norm(&x, &Norm::new(4));
        let m: f32 = y.data().iter().sum();
        assert!(m.abs() < 1e-5);
    }
}
