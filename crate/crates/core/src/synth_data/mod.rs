//! Paired source/target synthetic detection data and augmentations.

mod augment;
mod dataset;
pub mod io;
mod render;
mod scene;

pub use augment::{
    apply_photometric, apply_strong, apply_weak, apply_weak_with, transform_box, warp, AugRecord,
    Photometric, StrongAugConfig, WeakAugConfig, CUTOUT_FILL,
};
pub use dataset::{
    generate_dataset, scene_seed, target_ground_truth_reads, Dataset, DatasetConfig, LabeledSplit,
    TargetSplit, EVAL_ID_OFFSET,
};
pub use render::{quantize, render_target, DomainParams, FOG_COLOR};
pub use scene::{generate_scene, GenConfig, Scene, SceneObject, CLASS_NAMES};
