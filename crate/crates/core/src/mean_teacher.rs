//! Teacher lifecycle: EMA updates, pseudo-labels, Cutout exclusion and
//! label-noise injection.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{
    decode, predict, DecodeConfig, DetectorConfig, DetectorParams, PredictionValues,
};
use crate::error::{CmtError, Result};
use crate::geometry::BBox;
use crate::numerics::{sample_bilinear, Tensor};
use crate::synth_data::{transform_box, AugRecord};

pub const DEFAULT_ALPHA: f64 = 0.9996;
pub const DEFAULT_GAMMA: f64 = 0.6;
/// Per-pixel difference threshold (40 on the 0-255 scale).
pub const PIXEL_DIFF_THRESHOLD: f64 = 40.0 / 255.0;
/// A box is excluded when more than this fraction of its pixels differ.
pub const EXCLUSION_RATIO: f64 = 0.5;

/// `θᵀ ← α·θᵀ + (1−α)·θˢ` for every tensor, in place.
pub fn ema_update(
    teacher: &mut DetectorParams,
    student: &DetectorParams,
    alpha: f64,
) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(CmtError::ConfigInvalid(format!(
            "EMA momentum {alpha} outside [0, 1)"
        )));
    }
    teacher.check_compatible(student)?;
    for (name, t) in teacher.iter_mut() {
        let s = student.get(name).expect("checked compatible");
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = alpha * *tv + (1.0 - alpha) * sv;
        }
    }
    Ok(())
}

/// Teacher detections kept as training targets, in the teacher view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
    pub scores: Vec<f64>,
    pub view: AugRecord,
}

impl PseudoLabelSet {
    pub fn empty(view: AugRecord) -> Self {
        PseudoLabelSet {
            boxes: Vec::new(),
            classes: Vec::new(),
            scores: Vec::new(),
            view,
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Keeps the entries at `indices` (ascending).
    pub fn select(&self, indices: &[usize]) -> PseudoLabelSet {
        PseudoLabelSet {
            boxes: indices.iter().map(|&i| self.boxes[i]).collect(),
            classes: indices.iter().map(|&i| self.classes[i]).collect(),
            scores: indices.iter().map(|&i| self.scores[i]).collect(),
            view: self.view.clone(),
        }
    }

    /// Labels mapped into another view, as `(box, class)` pairs; boxes that
    /// leave that view are skipped.
    pub fn mapped_to(&self, to: &AugRecord) -> Vec<(BBox, usize)> {
        self.boxes
            .iter()
            .zip(&self.classes)
            .filter_map(|(b, &c)| transform_box(b, &self.view, to).ok().map(|m| (m, c)))
            .collect()
    }
}

/// Pseudo-labels from an already computed teacher prediction.
pub fn pseudo_labels_from(
    pred: &PredictionValues,
    view: AugRecord,
    gamma: f64,
    nms_iou: f64,
) -> PseudoLabelSet {
    let cfg = DecodeConfig {
        score_thresh: gamma,
        nms_iou,
        max_dets: DecodeConfig::EVAL.max_dets,
    };
    let mut set = PseudoLabelSet::empty(view);
    for d in decode(pred, &cfg) {
        set.boxes.push(d.bbox);
        set.classes.push(d.class_id);
        set.scores.push(d.score);
    }
    set
}

/// Runs the teacher without gradient recording on its weak view.
pub fn pseudo_label(
    teacher: &DetectorParams,
    cfg: &DetectorConfig,
    img_weak: &Tensor,
    view: AugRecord,
    gamma: f64,
    nms_iou: f64,
) -> Result<PseudoLabelSet> {
    Ok(pseudo_labels_from(
        &predict(img_weak, teacher, cfg)?,
        view,
        gamma,
        nms_iou,
    ))
}

/// Fraction of student-view pixels inside `bbox` (student coordinates)
/// whose max-channel difference to the aligned teacher view exceeds
/// [`PIXEL_DIFF_THRESHOLD`]. `None` when no pixel center lies in the box.
pub fn changed_pixel_ratio(
    img_teacher: &Tensor,
    teacher_view: &AugRecord,
    img_student: &Tensor,
    student_view: &AugRecord,
    bbox: &BBox,
) -> Option<f64> {
    let (c, h, w) = (
        img_student.shape()[0],
        img_student.shape()[1],
        img_student.shape()[2],
    );
    let (th, tw) = (img_teacher.shape()[1], img_teacher.shape()[2]);
    let same = teacher_view.same_geometry(student_view);
    let (mut total, mut changed) = (0usize, 0usize);
    let y_lo = bbox.y1.floor().max(0.0) as usize;
    let x_lo = bbox.x1.floor().max(0.0) as usize;
    for y in y_lo..h {
        let py = y as f64 + 0.5;
        if py > bbox.y2 {
            break;
        }
        for x in x_lo..w {
            let px = x as f64 + 0.5;
            if px > bbox.x2 {
                break;
            }
            if !bbox.contains(px, py) {
                continue;
            }
            total += 1;
            let diff = (0..c)
                .map(|ch| {
                    let s = img_student.data()[(ch * h + y) * w + x];
                    let t = if same {
                        img_teacher.data()[(ch * th + y) * tw + x]
                    } else {
                        let (ox, oy) = student_view.to_original(px, py);
                        let (tx, ty) = teacher_view.to_view(ox, oy);
                        sample_bilinear(img_teacher.data(), th, tw, ch, tx, ty)
                    };
                    (s - t).abs()
                })
                .fold(0.0, f64::max);
            if diff > PIXEL_DIFF_THRESHOLD {
                changed += 1;
            }
        }
    }
    (total > 0).then(|| changed as f64 / total as f64)
}

/// Drops labels whose student-view box is mostly erased. Returns the kept
/// set and the indices of excluded labels.
pub fn cutout_exclusion(
    img_teacher: &Tensor,
    img_student: &Tensor,
    labels: &PseudoLabelSet,
    student_view: &AugRecord,
) -> (PseudoLabelSet, Vec<usize>) {
    let mut keep = Vec::with_capacity(labels.len());
    let mut excluded = Vec::new();
    for (i, b) in labels.boxes.iter().enumerate() {
        let ratio = transform_box(b, &labels.view, student_view)
            .ok()
            .and_then(|sb| {
                changed_pixel_ratio(img_teacher, &labels.view, img_student, student_view, &sb)
            });
        match ratio {
            Some(r) if r > EXCLUSION_RATIO => excluded.push(i),
            _ => keep.push(i),
        }
    }
    (labels.select(&keep), excluded)
}

/// Re-draws the class of `round(fraction·N)` labels chosen without
/// replacement; the new class is uniform over all `num_classes` and may
/// equal the old one.
pub fn inject_label_noise<R: Rng>(
    labels: &PseudoLabelSet,
    fraction: f64,
    num_classes: usize,
    rng: &mut R,
) -> PseudoLabelSet {
    let mut out = labels.clone();
    let n = labels.len();
    let k = ((fraction * n as f64).round() as usize).min(n);
    if k == 0 || num_classes == 0 {
        return out;
    }
    for i in sample(rng, n, k) {
        out.classes[i] = rng.gen_range(0..num_classes);
    }
    out
}
