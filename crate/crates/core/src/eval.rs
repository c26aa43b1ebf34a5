//! Center-distance average precision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decoder::DetectionBox;
use crate::scene::GtBox;

pub const THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
const RECALL_POINTS: usize = 101;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub thresholds: [f64; 4],
    /// AP per ground-truth class, one entry per threshold.
    pub per_class: BTreeMap<usize, [f64; 4]>,
    pub map: f64,
}

impl EvalResult {
    pub fn ap(&self, class: usize, threshold: f64) -> Option<f64> {
        let t = THRESHOLDS.iter().position(|&x| x == threshold)?;
        self.per_class.get(&class).map(|a| a[t])
    }
}

fn dist_xy(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// True-positive flags in descending score order (ties by input order).
pub fn greedy_match(dets: &[&DetectionBox], gts: &[&GtBox], threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|i| {
            let best = gts
                .iter()
                .enumerate()
                .filter(|(j, _)| !taken[*j])
                .map(|(j, g)| (dist_xy(&dets[i].center, &g.center), j))
                .filter(|(d, _)| *d <= threshold)
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            match best {
                Some((_, j)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// 101-point interpolated AP from ranked true-positive flags.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(tp.len());
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        curve.push((hits as f64 / num_gt as f64, hits as f64 / (k + 1) as f64));
    }
    // Precision envelope, then sample it at each recall level.
    for k in (0..curve.len().saturating_sub(1)).rev() {
        curve[k].1 = curve[k].1.max(curve[k + 1].1);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for i in 0..RECALL_POINTS {
        let r = i as f64 / (RECALL_POINTS - 1) as f64;
        while k < curve.len() && curve[k].0 < r - 1e-12 {
            k += 1;
        }
        if k < curve.len() {
            sum += curve[k].1;
        }
    }
    sum / RECALL_POINTS as f64
}

pub fn eval_detections(dets: &[DetectionBox], gt: &[GtBox]) -> EvalResult {
    let mut per_class = BTreeMap::new();
    for class in gt.iter().map(|g| g.class) {
        if per_class.contains_key(&class) {
            continue;
        }
        let d: Vec<&DetectionBox> = dets.iter().filter(|d| d.class_id == class).collect();
        let g: Vec<&GtBox> = gt.iter().filter(|g| g.class == class).collect();
        let aps = THRESHOLDS.map(|t| average_precision(&greedy_match(&d, &g, t), g.len()));
        per_class.insert(class, aps);
    }
    let n = per_class.len() * THRESHOLDS.len();
    let map = if n == 0 { 0.0 } else { per_class.values().flatten().sum::<f64>() / n as f64 };
    EvalResult { thresholds: THRESHOLDS, per_class, map }
}
