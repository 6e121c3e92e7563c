//! IoU, greedy matching, all-point average precision and mAP@0.5.
//!
//! This is the only module that can read target-domain annotations: it
//! alone can construct the [`GroundTruthAccess`] token that
//! [`TargetSplit::ground_truth`] demands.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{decode, predict, DecodeConfig, Detection, DetectorConfig, DetectorParams};
use crate::error::{CmtError, Result};
use crate::geometry::BBox;
use crate::numerics::Tensor;
use crate::synth_data::{LabeledSplit, SceneObject, TargetSplit};

pub const MATCH_IOU: f64 = 0.5;
pub const INTERPOLATION: &str = "all-point";

/// Capability token for reading target-domain annotations.
pub struct GroundTruthAccess(());

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(a.iou(b))
}

/// TP/FP flag per detection of one image and class. `dets` must already be
/// ranked by descending score.
pub fn match_detections(dets: &[BBox], gts: &[BBox], iou_thresh: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = d.iou(gt);
                if v >= iou_thresh && best.map_or(true, |(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Area under the right-max precision envelope. `ranked` holds
/// `(score, is_tp)` and is ranked here by descending score (stable).
pub fn average_precision(ranked: &[(f64, bool)], num_gt: usize) -> f64 {
    if num_gt == 0 || ranked.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| ranked[b].0.total_cmp(&ranked[a].0));
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &i in &order {
        if ranked[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub num_gt: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// AP per class; classes without ground truth report 0.
    pub per_class_ap: BTreeMap<usize, f64>,
    /// Mean AP over classes with at least one ground-truth instance.
    pub map50: f64,
    pub counts: BTreeMap<usize, ClassCounts>,
    pub interpolation: String,
    pub num_images: usize,
}

/// Scores per-image detections against per-image ground truth.
pub fn evaluate_detections(
    dets: &[Vec<Detection>],
    gts: &[Vec<SceneObject>],
    num_classes: usize,
) -> Result<EvalResult> {
    if dets.len() != gts.len() {
        return Err(CmtError::ShapeMismatch(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    let mut ranked: Vec<Vec<(f64, bool)>> = vec![Vec::new(); num_classes];
    let mut counts = vec![ClassCounts::default(); num_classes];
    for (img_dets, img_gts) in dets.iter().zip(gts) {
        for c in 0..num_classes {
            let mut mine: Vec<&Detection> = img_dets.iter().filter(|d| d.class_id == c).collect();
            mine.sort_by(|a, b| b.score.total_cmp(&a.score));
            let boxes: Vec<BBox> = mine.iter().map(|d| d.bbox).collect();
            let gt_boxes: Vec<BBox> = img_gts
                .iter()
                .filter(|o| o.class_id == c)
                .map(|o| o.bbox)
                .collect();
            let flags = match_detections(&boxes, &gt_boxes, MATCH_IOU);
            let tp = flags.iter().filter(|&&f| f).count();
            counts[c].tp += tp;
            counts[c].fp += flags.len() - tp;
            counts[c].num_gt += gt_boxes.len();
            counts[c].fn_ += gt_boxes.len() - tp;
            ranked[c].extend(mine.iter().zip(flags).map(|(d, f)| (d.score, f)));
        }
    }
    let mut per_class_ap = BTreeMap::new();
    let mut sum = 0.0;
    let mut n = 0;
    for c in 0..num_classes {
        let ap = average_precision(&ranked[c], counts[c].num_gt);
        per_class_ap.insert(c, ap);
        if counts[c].num_gt > 0 {
            sum += ap;
            n += 1;
        }
    }
    Ok(EvalResult {
        per_class_ap,
        map50: if n > 0 { sum / n as f64 } else { 0.0 },
        counts: counts.into_iter().enumerate().collect(),
        interpolation: INTERPOLATION.to_string(),
        num_images: dets.len(),
    })
}

/// Decodes every image with the evaluation thresholds.
pub fn detect_all(
    params: &DetectorParams,
    cfg: &DetectorConfig,
    images: &[Tensor],
) -> Result<Vec<Vec<Detection>>> {
    images
        .par_iter()
        .map(|img| Ok(decode(&predict(img, params, cfg)?, &DecodeConfig::EVAL)))
        .collect()
}

/// mAP of `params` on a held-out target split.
pub fn evaluate(
    params: &DetectorParams,
    cfg: &DetectorConfig,
    split: &TargetSplit,
) -> Result<EvalResult> {
    let dets = detect_all(params, cfg, &split.images)?;
    evaluate_detections(
        &dets,
        split.ground_truth(&GroundTruthAccess(())),
        cfg.num_classes,
    )
}

/// mAP of `params` on a labeled (source-domain) split.
pub fn evaluate_labeled(
    params: &DetectorParams,
    cfg: &DetectorConfig,
    split: &LabeledSplit,
) -> Result<EvalResult> {
    let dets = detect_all(params, cfg, &split.images)?;
    evaluate_detections(&dets, &split.annotations, cfg.num_classes)
}

/// Scores externally produced detections against a target split.
pub fn evaluate_target_detections(
    dets: &[Vec<Detection>],
    split: &TargetSplit,
    num_classes: usize,
) -> Result<EvalResult> {
    evaluate_detections(
        dets,
        split.ground_truth(&GroundTruthAccess(())),
        num_classes,
    )
}

const BOX_COLORS: [[f64; 3]; 3] = [[1.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]];

/// Copy of `img` with detection outlines drawn in per-class colors.
pub fn draw_detections(img: &Tensor, dets: &[Detection]) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = img.clone();
    let data = out.data_mut();
    for d in dets {
        let color = BOX_COLORS[d.class_id % BOX_COLORS.len()];
        let x1 = (d.bbox.x1.floor() as usize).min(w - 1);
        let y1 = (d.bbox.y1.floor() as usize).min(h - 1);
        let x2 = ((d.bbox.x2.ceil() as usize).max(1) - 1).min(w - 1);
        let y2 = ((d.bbox.y2.ceil() as usize).max(1) - 1).min(h - 1);
        let mut put = |x: usize, y: usize| {
            for (c, v) in color.iter().enumerate() {
                data[(c * h + y) * w + x] = *v;
            }
        };
        for x in x1..=x2 {
            put(x, y1);
            put(x, y2);
        }
        for y in y1..=y2 {
            put(x1, y);
            put(x2, y);
        }
    }
    out
}
