use std::cell::Cell;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_scene, GenConfig, SceneObject};
use crate::error::{CmtError, Result};
use crate::evaluation::GroundTruthAccess;
use crate::numerics::Tensor;

/// Scene ids of evaluation splits start here so they never collide with
/// training ids.
pub const EVAL_ID_OFFSET: u64 = 1 << 32;

thread_local! {
    static TARGET_GT_READS: Cell<usize> = const { Cell::new(0) };
}

/// Number of target-domain annotation reads made on the calling thread.
pub fn target_ground_truth_reads() -> usize {
    TARGET_GT_READS.with(Cell::get)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub generator: GenConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            train_scenes: 500,
            eval_scenes: 100,
            generator: GenConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSplit {
    pub ids: Vec<u64>,
    pub images: Vec<Tensor>,
    pub annotations: Vec<Vec<SceneObject>>,
}

impl LabeledSplit {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Target-domain split. Images are public; annotations can only be read
/// with a [`GroundTruthAccess`] token, which only the evaluation module can
/// mint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TargetSplit {
    pub ids: Vec<u64>,
    pub images: Vec<Tensor>,
    annotations: Vec<Vec<SceneObject>>,
}

impl TargetSplit {
    pub fn new(ids: Vec<u64>, images: Vec<Tensor>, annotations: Vec<Vec<SceneObject>>) -> Self {
        TargetSplit {
            ids,
            images,
            annotations,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Raw annotations for serialization; not an evaluation read.
    pub(crate) fn annotations_for_storage(&self) -> &[Vec<SceneObject>] {
        &self.annotations
    }

    pub fn ground_truth(&self, _access: &GroundTruthAccess) -> &[Vec<SceneObject>] {
        TARGET_GT_READS.with(|c| c.set(c.get() + 1));
        &self.annotations
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub source_train: LabeledSplit,
    pub target_train: TargetSplit,
    pub source_eval: LabeledSplit,
    pub target_eval: TargetSplit,
}

/// Per-scene random stream seed.
pub fn scene_seed(base: u64, scene_id: u64) -> u64 {
    base ^ scene_id
}

fn generate_split(cfg: &DatasetConfig, ids: Vec<u64>) -> Result<(LabeledSplit, TargetSplit)> {
    let scenes = ids
        .par_iter()
        .map(|&id| {
            let mut scene = generate_scene(scene_seed(cfg.seed, id), &cfg.generator)?;
            scene.id = id;
            Ok(scene)
        })
        .collect::<Result<Vec<_>, CmtError>>()?;
    let mut source = LabeledSplit::default();
    let mut target = TargetSplit::default();
    for scene in scenes {
        source.ids.push(scene.id);
        source.images.push(scene.image_source);
        source.annotations.push(scene.objects.clone());
        target.ids.push(scene.id);
        target.images.push(scene.image_target);
        target.annotations.push(scene.objects);
    }
    Ok((source, target))
}

/// Generates paired source/target train and eval splits. Pure function of
/// the config.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.generator.validate()?;
    let (source_train, target_train) = generate_split(cfg, (0..cfg.train_scenes as u64).collect())?;
    let (source_eval, target_eval) = generate_split(
        cfg,
        (0..cfg.eval_scenes as u64)
            .map(|i| EVAL_ID_OFFSET + i)
            .collect(),
    )?;
    Ok(Dataset {
        config: cfg.clone(),
        source_train,
        target_train,
        source_eval,
        target_eval,
    })
}
