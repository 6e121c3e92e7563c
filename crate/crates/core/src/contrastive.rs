//! Object-level contrastive learning between student and teacher features.

use serde::{Deserialize, Serialize};

use crate::detector::BackboneFeatures;
use crate::error::{CmtError, Result};
use crate::geometry::BBox;
use crate::mean_teacher::PseudoLabelSet;
use crate::numerics::{stack, Tensor, Var, DEFAULT_SAMPLES_PER_BIN};
use crate::synth_data::{transform_box, AugRecord};

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_LAMBDA: f64 = 0.05;
/// RoI output side per level.
pub const ROI_OUT: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSource {
    Student,
    Teacher,
}

pub struct ObjectFeature<'t> {
    /// Unit-norm pooled feature `[C·oh·ow]`.
    pub vec: Var<'t>,
    pub object_index: usize,
    pub level: usize,
    pub source: FeatureSource,
}

/// Pools one feature per box. Each box is mapped from `view` into
/// `target_view`, divided by `stride`, RoI-aligned and l2-normalized.
/// Boxes that leave the view or cover less than one feature cell yield an
/// error in their slot.
#[allow(clippy::too_many_arguments)]
pub fn extract_object_features<'t>(
    map: Var<'t>,
    stride: usize,
    level: usize,
    boxes: &[BBox],
    view: &AugRecord,
    target_view: &AugRecord,
    out_size: usize,
    source: FeatureSource,
) -> Vec<Result<ObjectFeature<'t>>> {
    boxes
        .iter()
        .enumerate()
        .map(|(object_index, b)| {
            let mapped = transform_box(b, view, target_view)?;
            let scaled = mapped.scaled(1.0 / stride as f64);
            if scaled.width() < 1.0 || scaled.height() < 1.0 {
                return Err(CmtError::DegenerateBox {
                    x1: scaled.x1,
                    y1: scaled.y1,
                    x2: scaled.x2,
                    y2: scaled.y2,
                });
            }
            let vec = map
                .roi_align(
                    scaled.to_array(),
                    out_size,
                    out_size,
                    DEFAULT_SAMPLES_PER_BIN,
                )?
                .flatten()
                .l2_normalize()?;
            Ok(ObjectFeature {
                vec,
                object_index,
                level,
                source,
            })
        })
        .collect()
}

/// `P(i) = { p | classes[p] == classes[i] }`.
pub fn positive_sets(classes: &[usize]) -> Vec<Vec<usize>> {
    classes
        .iter()
        .map(|ci| (0..classes.len()).filter(|&p| classes[p] == *ci).collect())
        .collect()
}

fn similarity_log_softmax<'t>(zs: &[Var<'t>], zt: &[Tensor], tau: f64) -> Result<Var<'t>> {
    let n = zs.len();
    if n == 0 {
        return Err(CmtError::EmptyBatch);
    }
    if zt.len() != n {
        return Err(CmtError::ShapeMismatch(format!(
            "{n} student vs {} teacher features",
            zt.len()
        )));
    }
    let d = zt[0].numel();
    let mut kt = vec![0.0; d * n];
    for (j, z) in zt.iter().enumerate() {
        if z.numel() != d {
            return Err(CmtError::ShapeMismatch(
                "teacher features differ in length".into(),
            ));
        }
        for (k, v) in z.data().iter().enumerate() {
            kt[k * n + j] = *v;
        }
    }
    let tape = zs[0].tape();
    let logits = stack(zs)?
        .matmul(&tape.constant(Tensor::new([d, n], kt)?))?
        .scale(1.0 / tau);
    logits.log_softmax_rows()
}

/// Class-based contrastive loss
/// `(λ/N) Σᵢ −1/|P(i)| Σ_{p∈P(i)} log softmax_j(zᵢˢ·zⱼᵀ/τ)[p]`.
/// Teacher features enter as constants.
pub fn contrastive_loss<'t>(
    zs: &[Var<'t>],
    zt: &[Tensor],
    classes: &[usize],
    tau: f64,
    lambda: f64,
) -> Result<Var<'t>> {
    let n = zs.len();
    if classes.len() != n {
        return Err(CmtError::ShapeMismatch(format!(
            "{n} features but {} classes",
            classes.len()
        )));
    }
    let lsm = similarity_log_softmax(zs, zt, tau)?;
    let mut weights = vec![0.0; n * n];
    for (i, pos) in positive_sets(classes).iter().enumerate() {
        for &p in pos {
            weights[i * n + p] = 1.0 / pos.len() as f64;
        }
    }
    let tape = lsm.tape();
    Ok(lsm
        .mul(&tape.constant(Tensor::new([n, n], weights)?))?
        .sum()
        .scale(-lambda / n as f64))
}

/// Instance-discrimination loss with batch-local negatives:
/// mean of `−log softmax_j(z_iᵠ·z_jᴷ/τ)[i]`.
pub fn moco_loss<'t>(zq: &[Var<'t>], zk: &[Tensor], tau: f64) -> Result<Var<'t>> {
    let n = zq.len();
    if n < 2 {
        return Err(CmtError::EmptyBatch);
    }
    let lsm = similarity_log_softmax(zq, zk, tau)?;
    let mut eye = vec![0.0; n * n];
    for i in 0..n {
        eye[i * n + i] = 1.0;
    }
    let tape = lsm.tape();
    Ok(lsm
        .mul(&tape.constant(Tensor::new([n, n], eye)?))?
        .sum()
        .scale(-1.0 / n as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau: f64,
    /// Weight applied inside the loss; the trainer keeps this at 1 and
    /// applies its own balancing weight once.
    pub lambda: f64,
    pub levels: Vec<usize>,
    pub class_based: bool,
    pub multi_scale: bool,
    pub out_size: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: DEFAULT_TAU,
            lambda: 1.0,
            levels: vec![0, 1, 2, 3],
            class_based: true,
            multi_scale: true,
            out_size: ROI_OUT,
        }
    }
}

impl ContrastiveConfig {
    /// Levels actually used: all configured ones, or only the finest.
    pub fn active_levels(&self) -> Vec<usize> {
        if self.multi_scale {
            self.levels.clone()
        } else {
            self.levels.iter().min().into_iter().copied().collect()
        }
    }
}

/// Loss summed over levels, with per-level object counts for tracing.
pub struct MultiScaleTerm<'t> {
    pub loss: Var<'t>,
    pub objects_per_level: Vec<(usize, usize)>,
    /// Class ids fed to the loss (all distinct when class-based contrast is off).
    pub classes_used: Vec<Vec<usize>>,
}

/// Per-image inputs of the batch-level multi-scale loss.
pub struct ContrastiveInput<'a, 't, 'u> {
    pub student: &'a BackboneFeatures<'t>,
    pub teacher: &'a BackboneFeatures<'u>,
    pub labels: &'a PseudoLabelSet,
    pub student_view: &'a AugRecord,
}

/// Sums the contrastive loss over the active levels. Objects of all images
/// in the batch form one contrast set per level; objects that cannot be
/// pooled on either side are dropped from both.
pub fn multi_scale_contrastive<'t>(
    batch: &[ContrastiveInput<'_, 't, '_>],
    cfg: &ContrastiveConfig,
) -> Result<MultiScaleTerm<'t>> {
    let mut total: Option<Var<'t>> = None;
    let mut objects_per_level = Vec::new();
    let mut classes_used = Vec::new();
    for level in cfg.active_levels() {
        let mut zs = Vec::new();
        let mut zt = Vec::new();
        let mut classes = Vec::new();
        for item in batch {
            let (Some(fs), Some(ft)) = (item.student.maps.get(level), item.teacher.maps.get(level))
            else {
                return Err(CmtError::ShapeMismatch(format!(
                    "no backbone level {level}"
                )));
            };
            let stride = item.student.strides[level];
            let view = &item.labels.view;
            let s = extract_object_features(
                *fs,
                stride,
                level,
                &item.labels.boxes,
                view,
                item.student_view,
                cfg.out_size,
                FeatureSource::Student,
            );
            let t = extract_object_features(
                *ft,
                item.teacher.strides[level],
                level,
                &item.labels.boxes,
                view,
                view,
                cfg.out_size,
                FeatureSource::Teacher,
            );
            for ((s, t), &c) in s.into_iter().zip(t).zip(&item.labels.classes) {
                if let (Ok(s), Ok(t)) = (s, t) {
                    zs.push(s.vec);
                    zt.push(t.vec.to_tensor());
                    classes.push(c);
                }
            }
        }
        objects_per_level.push((level, zs.len()));
        if zs.is_empty() {
            continue;
        }
        if !cfg.class_based {
            classes = (0..zs.len()).collect();
        }
        let l = contrastive_loss(&zs, &zt, &classes, cfg.tau, cfg.lambda)?;
        total = Some(match total {
            Some(acc) => acc.add(&l)?,
            None => l,
        });
        classes_used.push(classes);
    }
    let loss = total.ok_or(CmtError::EmptyBatch)?;
    Ok(MultiScaleTerm {
        loss,
        objects_per_level,
        classes_used,
    })
}

#[cfg(test)]
mod tests;
