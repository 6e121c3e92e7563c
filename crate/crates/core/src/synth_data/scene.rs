use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{quantize, render_target, DomainParams};
use crate::error::{CmtError, Result};
use crate::geometry::BBox;
use crate::numerics::Tensor;

/// Shape classes drawn by the generator, indexed by class id.
pub const CLASS_NAMES: [&str; 3] = ["disc", "square", "triangle"];

/// Mean RGB color of each class; individual objects are jittered around it.
const CLASS_COLORS: [[f64; 3]; 3] = [[0.85, 0.30, 0.25], [0.30, 0.75, 0.35], [0.30, 0.40, 0.85]];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub num_classes: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Per-channel half-width of the uniform color jitter around the class mean.
    pub color_jitter: f64,
    pub max_attempts: usize,
    pub max_pair_iou: f64,
    pub domain: DomainParams,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            width: 64,
            height: 64,
            min_objects: 1,
            max_objects: 6,
            num_classes: 3,
            min_size: 12.0,
            max_size: 24.0,
            color_jitter: 0.15,
            max_attempts: 200,
            max_pair_iou: 0.5,
            domain: DomainParams::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CmtError::ConfigInvalid(m.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if self.num_classes == 0 || self.num_classes > CLASS_NAMES.len() {
            return bad("num_classes must be between 1 and 3");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object count range must satisfy 1 <= min <= max");
        }
        if !(self.min_size >= 2.0 && self.min_size <= self.max_size) {
            return bad("object size range must satisfy 2 <= min <= max");
        }
        if self.max_size > self.width.min(self.height) as f64 {
            return bad("objects larger than the image");
        }
        self.domain.validate()
    }
}

/// One synthetic image pair with shared geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub objects: Vec<SceneObject>,
    pub image_source: Tensor,
    pub image_target: Tensor,
    /// Seed of the per-scene random stream; drives target-domain noise.
    pub seed: u64,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Square { x: f64, y: f64, side: f64 },
    Triangle { cx: f64, top: f64, size: f64 },
}

impl Shape {
    fn new(class_id: usize, x: f64, y: f64, size: f64) -> Shape {
        match class_id {
            0 => Shape::Disc {
                cx: x + size / 2.0,
                cy: y + size / 2.0,
                r: size / 2.0,
            },
            1 => Shape::Square { x, y, side: size },
            _ => Shape::Triangle {
                cx: x + size / 2.0,
                top: y,
                size,
            },
        }
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Shape::Square { x, y, side } => px >= x && px <= x + side && py >= y && py <= y + side,
            Shape::Triangle { cx, top, size } => {
                let t = (py - top) / size;
                (0.0..=1.0).contains(&t) && (px - cx).abs() <= t * size / 2.0
            }
        }
    }
}

/// Draws one scene. Pure function of `(seed, cfg)`.
pub fn generate_scene(seed: u64, cfg: &GenConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width, cfg.height);
    let mut image = background(&mut rng, w, h);

    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut placed: Vec<(Shape, BBox, usize, [f64; 3])> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut accepted = None;
        for _ in 0..cfg.max_attempts {
            let class_id = rng.gen_range(0..cfg.num_classes);
            let size = rng.gen_range(cfg.min_size..=cfg.max_size);
            let x = rng.gen_range(0.0..=(w as f64 - size));
            let y = rng.gen_range(0.0..=(h as f64 - size));
            let shape = Shape::new(class_id, x, y, size);
            let Some(bbox) = raster_extent(&shape, w, h) else {
                continue;
            };
            if placed
                .iter()
                .all(|(_, other, _, _)| bbox.iou(other) < cfg.max_pair_iou)
            {
                let base = CLASS_COLORS[class_id];
                let color = base.map(|c| {
                    (c + rng.gen_range(-cfg.color_jitter..=cfg.color_jitter)).clamp(0.0, 1.0)
                });
                accepted = Some((shape, bbox, class_id, color));
                break;
            }
        }
        match accepted {
            Some(obj) => placed.push(obj),
            None => {
                return Err(CmtError::ConfigInvalid(format!(
                    "could not place {count} objects in a {w}x{h} image after {} attempts",
                    cfg.max_attempts
                )))
            }
        }
    }

    for (shape, bbox, _, color) in &placed {
        paint(&mut image, w, h, shape, bbox, color);
    }
    quantize(&mut image);
    let image_source = Tensor::new(vec![3, h, w], image).expect("image buffer sized 3*h*w");
    let objects = placed
        .iter()
        .map(|&(_, bbox, class_id, _)| SceneObject { class_id, bbox })
        .collect();
    let mut scene = Scene {
        id: seed,
        objects,
        image_target: image_source.clone(),
        image_source,
        seed,
    };
    let mut target = render_target(&scene, &cfg.domain);
    quantize(target.data_mut());
    scene.image_target = target;
    Ok(scene)
}

/// Low-saturation textured background: a random mix of two smooth waves plus
/// a faint checker pattern.
fn background(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<f64> {
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.35..0.6));
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.06..0.06));
    let fx = rng.gen_range(0.05..0.25);
    let fy = rng.gen_range(0.05..0.25);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp = rng.gen_range(0.04..0.12);
    let cell = rng.gen_range(4..10);
    let checker = rng.gen_range(0.0..0.05);
    let mut img = vec![0.0; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let wave = amp * ((fx * x as f64 + phase).sin() * (fy * y as f64).cos());
            let chk = if ((x / cell) + (y / cell)) % 2 == 0 {
                checker
            } else {
                -checker
            };
            for c in 0..3 {
                img[(c * h + y) * w + x] = (base[c] + tint[c] + wave + chk).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Tight pixel extent of a shape (pixel `(i, j)` is covered when its center is inside).
fn raster_extent(shape: &Shape, w: usize, h: usize) -> Option<BBox> {
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x + 1);
                y2 = y2.max(y + 1);
            }
        }
    }
    (x1 != usize::MAX).then(|| BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64))
}

fn paint(img: &mut [f64], w: usize, h: usize, shape: &Shape, bbox: &BBox, color: &[f64; 3]) {
    for y in bbox.y1 as usize..bbox.y2 as usize {
        for x in bbox.x1 as usize..bbox.x2 as usize {
            if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                for c in 0..3 {
                    img[(c * h + y) * w + x] = color[c];
                }
            }
        }
    }
}
