//! Weak (geometric) and strong (photometric + Cutout) augmentation with
//! exact coordinate bookkeeping.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SceneObject;
use crate::error::{CmtError, Result};
use crate::geometry::BBox;
use crate::numerics::{gaussian_blur, sample_bilinear, Tensor};

/// Fill value of Cutout rectangles.
pub const CUTOUT_FILL: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Photometric {
    pub brightness: f64,
    pub contrast: f64,
    pub blur_sigma: f64,
}

impl Photometric {
    pub const IDENTITY: Photometric = Photometric {
        brightness: 1.0,
        contrast: 1.0,
        blur_sigma: 0.0,
    };
}

/// Everything needed to map coordinates between an original image and one
/// augmented view of it.
///
/// Original → view: crop window at `crop_offset` of side `crop_scale · size`
/// resized back to full size, then optional horizontal flip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugRecord {
    pub width: usize,
    pub height: usize,
    pub flip: bool,
    pub crop_offset: (f64, f64),
    pub crop_scale: f64,
    /// Cutout rectangles in view coordinates.
    pub cutout_rects: Vec<BBox>,
    pub photometric: Photometric,
    /// Indices of input objects that fell outside the view.
    pub dropped: Vec<usize>,
}

impl AugRecord {
    pub fn identity(width: usize, height: usize) -> Self {
        AugRecord {
            width,
            height,
            flip: false,
            crop_offset: (0.0, 0.0),
            crop_scale: 1.0,
            cutout_rects: Vec::new(),
            photometric: Photometric::IDENTITY,
            dropped: Vec::new(),
        }
    }

    pub fn geometric(
        width: usize,
        height: usize,
        flip: bool,
        crop_offset: (f64, f64),
        crop_scale: f64,
    ) -> Self {
        AugRecord {
            flip,
            crop_offset,
            crop_scale,
            ..Self::identity(width, height)
        }
    }

    /// Adds the photometric part of a strong-augmentation record.
    pub fn with_strong(mut self, strong: &AugRecord) -> Self {
        self.cutout_rects = strong.cutout_rects.clone();
        self.photometric = strong.photometric;
        self
    }

    /// True when both records apply the same geometric transform.
    pub fn same_geometry(&self, other: &AugRecord) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.flip == other.flip
            && self.crop_offset == other.crop_offset
            && self.crop_scale == other.crop_scale
    }

    pub fn to_view(&self, x: f64, y: f64) -> (f64, f64) {
        let xc = (x - self.crop_offset.0) / self.crop_scale;
        let yc = (y - self.crop_offset.1) / self.crop_scale;
        let xv = if self.flip {
            self.width as f64 - xc
        } else {
            xc
        };
        (xv, yc)
    }

    pub fn to_original(&self, x: f64, y: f64) -> (f64, f64) {
        let xc = if self.flip { self.width as f64 - x } else { x };
        (
            xc * self.crop_scale + self.crop_offset.0,
            y * self.crop_scale + self.crop_offset.1,
        )
    }

    /// Maps an original-coordinate box into this view (not clamped).
    pub fn box_to_view(&self, b: &BBox) -> BBox {
        let (ax, ay) = self.to_view(b.x1, b.y1);
        let (bx, by) = self.to_view(b.x2, b.y2);
        BBox::new(ax.min(bx), ay.min(by), ax.max(bx), ay.max(by))
    }

    /// Maps a view-coordinate box back into original coordinates.
    pub fn box_to_original(&self, b: &BBox) -> BBox {
        let (ax, ay) = self.to_original(b.x1, b.y1);
        let (bx, by) = self.to_original(b.x2, b.y2);
        BBox::new(ax.min(bx), ay.min(by), ax.max(bx), ay.max(by))
    }
}

/// Maps a box from `from`'s view into `to`'s view via original coordinates,
/// clamped to the destination image.
pub fn transform_box(b: &BBox, from: &AugRecord, to: &AugRecord) -> Result<BBox> {
    let mapped = if from.same_geometry(to) {
        *b
    } else {
        to.box_to_view(&from.box_to_original(b))
    };
    let clamped = mapped.clamp_to(to.width as f64, to.height as f64);
    if clamped.area() > 0.0 {
        Ok(clamped)
    } else {
        Err(CmtError::BoxOutsideView)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeakAugConfig {
    pub flip_prob: f64,
    pub min_crop_scale: f64,
}

impl Default for WeakAugConfig {
    fn default() -> Self {
        WeakAugConfig {
            flip_prob: 0.5,
            min_crop_scale: 0.9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrongAugConfig {
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub max_cutouts: usize,
    /// Side-length range of Cutout rectangles, as a fraction of the image side.
    pub cutout_size: (f64, f64),
}

impl Default for StrongAugConfig {
    fn default() -> Self {
        StrongAugConfig {
            brightness: (0.8, 1.2),
            contrast: (0.8, 1.2),
            blur_prob: 0.5,
            blur_sigma: (0.3, 1.2),
            max_cutouts: 2,
            cutout_size: (0.2, 0.45),
        }
    }
}

/// Random flip + crop-resize.
pub fn apply_weak<R: Rng>(
    img: &Tensor,
    objects: &[SceneObject],
    cfg: &WeakAugConfig,
    rng: &mut R,
) -> (Tensor, Vec<SceneObject>, AugRecord) {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let flip = rng.gen_bool(cfg.flip_prob);
    let scale = rng.gen_range(cfg.min_crop_scale..=1.0);
    let dx = rng.gen_range(0.0..=(1.0 - scale) * w as f64);
    let dy = rng.gen_range(0.0..=(1.0 - scale) * h as f64);
    let record = AugRecord::geometric(w, h, flip, (dx, dy), scale);
    apply_weak_with(img, objects, record)
}

/// Applies a fixed geometric record; boxes that leave the view are dropped
/// and their indices stored in `record.dropped`.
pub fn apply_weak_with(
    img: &Tensor,
    objects: &[SceneObject],
    mut record: AugRecord,
) -> (Tensor, Vec<SceneObject>, AugRecord) {
    let out = warp(img, &record);
    let identity = AugRecord::identity(record.width, record.height);
    let mut kept = Vec::with_capacity(objects.len());
    record.dropped.clear();
    for (i, obj) in objects.iter().enumerate() {
        match transform_box(&obj.bbox, &identity, &record) {
            Ok(bbox) => kept.push(SceneObject {
                class_id: obj.class_id,
                bbox,
            }),
            Err(_) => record.dropped.push(i),
        }
    }
    (out, kept, record)
}

/// Resamples `img` into the geometric view described by `record`.
pub fn warp(img: &Tensor, record: &AugRecord) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = vec![0.0; c * h * w];
    for v in 0..h {
        for u in 0..w {
            let (x, y) = record.to_original(u as f64 + 0.5, v as f64 + 0.5);
            for ch in 0..c {
                out[(ch * h + v) * w + u] = sample_bilinear(img.data(), h, w, ch, x, y);
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("shape preserved")
}

/// Color jitter, optional blur and Cutout. Geometry is untouched.
pub fn apply_strong<R: Rng>(
    img: &Tensor,
    cfg: &StrongAugConfig,
    rng: &mut R,
) -> (Tensor, AugRecord) {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let photometric = Photometric {
        brightness: rng.gen_range(cfg.brightness.0..=cfg.brightness.1),
        contrast: rng.gen_range(cfg.contrast.0..=cfg.contrast.1),
        blur_sigma: if rng.gen_bool(cfg.blur_prob) {
            rng.gen_range(cfg.blur_sigma.0..=cfg.blur_sigma.1)
        } else {
            0.0
        },
    };
    let n_cut = rng.gen_range(0..=cfg.max_cutouts);
    let cutouts = (0..n_cut)
        .map(|_| {
            let cw = rng.gen_range(cfg.cutout_size.0..=cfg.cutout_size.1) * w as f64;
            let chh = rng.gen_range(cfg.cutout_size.0..=cfg.cutout_size.1) * h as f64;
            let x = rng.gen_range(0.0..=(w as f64 - cw));
            let y = rng.gen_range(0.0..=(h as f64 - chh));
            BBox::new(x.round(), y.round(), (x + cw).round(), (y + chh).round())
        })
        .collect();
    let mut record = AugRecord::identity(w, h);
    record.photometric = photometric;
    record.cutout_rects = cutouts;
    (apply_photometric(img, &record), record)
}

/// Deterministic strong augmentation from a record's photometric fields and
/// Cutout rectangles.
pub fn apply_photometric(img: &Tensor, record: &AugRecord) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let p = record.photometric;
    let mut data = img.data().to_vec();
    if p.brightness != 1.0 {
        data.iter_mut()
            .for_each(|v| *v = (*v * p.brightness).clamp(0.0, 1.0));
    }
    if p.contrast != 1.0 {
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        data.iter_mut()
            .for_each(|v| *v = ((*v - mean) * p.contrast + mean).clamp(0.0, 1.0));
    }
    if p.blur_sigma > 0.0 {
        data = gaussian_blur(&data, c, h, w, p.blur_sigma);
    }
    for rect in &record.cutout_rects {
        for y in 0..h {
            for x in 0..w {
                if rect.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    for ch in 0..c {
                        data[(ch * h + y) * w + x] = CUTOUT_FILL;
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], data).expect("shape preserved")
}
