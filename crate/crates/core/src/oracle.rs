//! Independent reference computations used by the self-check suite and tests.
//!
//! Nothing here shares code with the production paths it is compared against:
//! no tape, no precomputed sampling taps, plain loops.

use crate::numerics::Tensor;

/// Dense RoIAlign: each sample point is clamped into the valid coordinate
/// range, then evaluated as a tent-weighted sum over every cell of the map.
pub fn roi_align_dense(
    map: &Tensor,
    bbox: [f64; 4],
    out_h: usize,
    out_w: usize,
    samples: usize,
) -> Vec<f64> {
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let [x1, y1, x2, y2] = bbox;
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        for by in 0..out_h {
            for bx in 0..out_w {
                let mut acc = 0.0;
                for sy in 0..samples {
                    for sx in 0..samples {
                        let fy = (by as f64 + (sy as f64 + 0.5) / samples as f64) / out_h as f64;
                        let fx = (bx as f64 + (sx as f64 + 0.5) / samples as f64) / out_w as f64;
                        let py = (y1 + fy * (y2 - y1) - 0.5).clamp(0.0, (h - 1) as f64);
                        let px = (x1 + fx * (x2 - x1) - 0.5).clamp(0.0, (w - 1) as f64);
                        for iy in 0..h {
                            let wy = (1.0 - (py - iy as f64).abs()).max(0.0);
                            if wy == 0.0 {
                                continue;
                            }
                            for ix in 0..w {
                                let wx = (1.0 - (px - ix as f64).abs()).max(0.0);
                                acc += wy * wx * map.at3(ch, iy, ix);
                            }
                        }
                    }
                }
                out[(ch * out_h + by) * out_w + bx] = acc / (samples * samples) as f64;
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Class-based contrastive loss evaluated with explicit nested loops and a
/// direct (un-shifted) softmax. Inputs are assumed unit-norm.
pub fn contrastive_double_loop(
    zs: &[Vec<f64>],
    zt: &[Vec<f64>],
    classes: &[usize],
    tau: f64,
    lambda: f64,
) -> f64 {
    let n = zs.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            denom += (dot(&zs[i], &zt[j]) / tau).exp();
        }
        let positives: Vec<usize> = (0..n).filter(|&p| classes[p] == classes[i]).collect();
        let mut inner = 0.0;
        for &p in &positives {
            let num = (dot(&zs[i], &zt[p]) / tau).exp();
            inner += (num / denom).ln();
        }
        total += -inner / positives.len() as f64;
    }
    lambda * total / n as f64
}

/// Instance-discrimination loss as a softmax cross-entropy where row `i` of
/// the similarity matrix has target class `i`.
pub fn moco_cross_entropy(zq: &[Vec<f64>], zk: &[Vec<f64>], tau: f64) -> f64 {
    let n = zq.len();
    let mut total = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = zk.iter().map(|k| dot(&zq[i], k) / tau).collect();
        let probs: Vec<f64> = {
            let e: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        };
        total += -probs[i].ln();
    }
    total / n as f64
}

/// Axis-aligned IoU written from interval overlaps.
pub fn iou_intervals(a: [f64; 4], b: [f64; 4]) -> f64 {
    let overlap = |lo1: f64, hi1: f64, lo2: f64, hi2: f64| (hi1.min(hi2) - lo1.max(lo2)).max(0.0);
    let inter = overlap(a[0], a[2], b[0], b[2]) * overlap(a[1], a[3], b[1], b[3]);
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy NMS by definition: a box survives iff no higher-ranked survivor of
/// the same class overlaps it by more than `thresh`. Ranking is by score
/// descending, then by input position.
pub fn nms_reference(
    boxes: &[[f64; 4]],
    scores: &[f64],
    classes: &[usize],
    thresh: f64,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut survivors: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = survivors
            .iter()
            .any(|&s| classes[s] == classes[i] && iou_intervals(boxes[s], boxes[i]) > thresh);
        if !suppressed {
            survivors.push(i);
        }
    }
    survivors
}
