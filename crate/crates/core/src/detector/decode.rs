use serde::{Deserialize, Serialize};

use super::PredictionValues;
use crate::geometry::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
}

impl DecodeConfig {
    /// Thresholds used for evaluation.
    pub const EVAL: DecodeConfig = DecodeConfig {
        score_thresh: 0.05,
        nms_iou: 0.5,
        max_dets: 20,
    };
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self::EVAL
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    /// Row-major index of the source cell.
    pub cell: usize,
}

/// Softmax over the class channel at one cell.
pub fn cell_probs(pred: &PredictionValues, cell: usize) -> Vec<f64> {
    let (hp, wp) = pred.grid();
    let m = hp * wp;
    let k = pred.logits.shape()[0];
    let logits: Vec<f64> = (0..k).map(|c| pred.logits.data()[c * m + cell]).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Candidate detections before NMS: one per non-background cell whose
/// winning probability reaches `score_thresh`, in cell order.
pub fn candidates(pred: &PredictionValues, score_thresh: f64) -> Vec<Detection> {
    let (hp, wp) = pred.grid();
    let m = hp * wp;
    let bg = pred.logits.shape()[0] - 1;
    let s = pred.stride as f64;
    let (img_w, img_h) = (wp as f64 * s, hp as f64 * s);
    let off = pred.offsets.data();
    let mut out = Vec::new();
    for cell in 0..m {
        let probs = cell_probs(pred, cell);
        let mut class_id = 0;
        for (c, &p) in probs.iter().enumerate() {
            if p > probs[class_id] {
                class_id = c;
            }
        }
        let score = probs[class_id];
        if class_id == bg || score < score_thresh {
            continue;
        }
        let (row, col) = (cell / wp, cell % wp);
        let (cx, cy) = ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s);
        let bbox = BBox::new(
            cx - off[cell],
            cy - off[m + cell],
            cx + off[2 * m + cell],
            cy + off[3 * m + cell],
        )
        .clamp_to(img_w, img_h);
        if bbox.is_valid() {
            out.push(Detection {
                bbox,
                class_id,
                score,
                cell,
            });
        }
    }
    out
}

/// Class-wise greedy NMS. Output is ranked by score descending, ties broken
/// by cell index.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.cell.cmp(&b.cell)));
    let mut suppressed = vec![false; dets.len()];
    for i in 0..dets.len() {
        if suppressed[i] {
            continue;
        }
        for j in i + 1..dets.len() {
            if !suppressed[j]
                && dets[j].class_id == dets[i].class_id
                && dets[i].bbox.iou(&dets[j].bbox) > iou_thresh
            {
                suppressed[j] = true;
            }
        }
    }
    dets.into_iter()
        .zip(suppressed)
        .filter_map(|(d, s)| (!s).then_some(d))
        .collect()
}

pub fn decode(pred: &PredictionValues, cfg: &DecodeConfig) -> Vec<Detection> {
    let mut dets = nms(candidates(pred, cfg.score_thresh), cfg.nms_iou);
    dets.truncate(cfg.max_dets);
    dets
}
