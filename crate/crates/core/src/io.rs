//! On-disk formats: the `DDHF` tensor container and detection JSON.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::decoder::DetectionBox;
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DDHF";
const VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.dims().len() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        ensure!(cur.len() >= n, Format, "truncated header");
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    ensure!(take(4)? == MAGIC, Format, "bad magic");
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let version = u32_at(take(4)?);
    ensure!(version == VERSION, Format, "unsupported version {version}");
    let dtype = u32_at(take(4)?);
    ensure!(dtype == DTYPE_F32, Format, "unsupported dtype {dtype}");
    let ndim = u32_at(take(4)?) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = u64::from_le_bytes(take(8)?.try_into().unwrap());
        dims.push(usize::try_from(d).map_err(|_| Error::Format(format!("dim {d} too large")))?);
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("dims overflow".into()))?;
    let payload = take(numel.checked_mul(4).ok_or_else(|| Error::Format("payload overflow".into()))?)?;
    ensure!(cur.is_empty(), Format, "{} trailing bytes", cur.len());
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(dims, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_tensor(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Formats a float with 9 significant digits, `%.9g` style.
pub fn fmt_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        // JSON has no representation for these
        return "null".to_string();
    }
    let sci = format!("{:.8e}", v);
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{:.*}", decimals, v);
        trim_zeros(&s).to_string()
    } else {
        format!("{}e{}", trim_zeros(mantissa), exp)
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Serializes detections as a JSON array with fixed key order.
pub fn detections_to_json(dets: &[DetectionBox]) -> String {
    let mut out = String::from("[");
    for (i, d) in dets.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let f = |v: f64| fmt_sig9(v);
        write!(
            out,
            "\n  {{\"center\":[{},{},{}],\"size\":[{},{},{}],\"yaw\":{},\"class\":{},\"score\":{}}}",
            f(d.center[0]),
            f(d.center[1]),
            f(d.center[2]),
            f(d.size[0]),
            f(d.size[1]),
            f(d.size[2]),
            f(d.yaw),
            d.class_id,
            f(d.score)
        )
        .unwrap();
    }
    if !dets.is_empty() {
        out.push('\n');
    }
    out.push_str("]\n");
    out
}

#[derive(Deserialize)]
struct DetectionRecord {
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
    class: usize,
    score: f64,
}

pub fn detections_from_json(text: &str) -> Result<Vec<DetectionBox>> {
    let recs: Vec<DetectionRecord> = serde_json::from_str(text)?;
    Ok(recs
        .into_iter()
        .map(|r| DetectionBox { center: r.center, size: r.size, yaw: r.yaw, class_id: r.class, score: r.score })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..4], b"DDHF");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 0);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[24..32].try_into().unwrap()), 1);
        assert_eq!(f32::from_le_bytes(b[36..40].try_into().unwrap()), -2.5);
        assert_eq!(b.len(), 40);
    }

    #[test]
    fn rejects_malformed() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = encode_tensor(&t);
        assert!(decode_tensor(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(decode_tensor(&extra).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_tensor(&bad).is_err());
        let mut v2 = b;
        v2[4] = 2;
        assert!(decode_tensor(&v2).is_err());
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(1.5), "1.5");
        assert_eq!(fmt_sig9(-54.0), "-54");
        assert_eq!(fmt_sig9(0.1), "0.1");
        assert_eq!(fmt_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig9(123456.789012), "123456.789");
        assert_eq!(fmt_sig9(1.0e-7), "1e-7");
        assert_eq!(fmt_sig9(2.5e12), "2.5e12");
    }

    #[test]
    fn detections_json_shape() {
        let d = DetectionBox { center: [1.0, -2.0, 0.5], size: [4.0, 2.0, 1.5], yaw: 0.25, class_id: 3, score: 0.75 };
        let s = detections_to_json(&[d.clone()]);
        assert!(s.contains("\"center\":[1,-2,0.5]"));
        let back = detections_from_json(&s).unwrap();
        assert_eq!(back, vec![d]);
        assert_eq!(detections_to_json(&[]), "[]\n");
    }

    proptest! {
        #[test]
        fn tensor_roundtrip(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32).sin()).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = decode_tensor(&encode_tensor(&t)).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn sig9_parses_back(v in -1.0e6f64..1.0e6) {
            let s = fmt_sig9(v);
            let p: f64 = s.parse().unwrap();
            prop_assert!((p - v).abs() <= 1e-8 * v.abs().max(1e-30) + 1e-300);
        }
    }
}
