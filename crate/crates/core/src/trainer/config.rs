use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::{ContrastiveConfig, DEFAULT_LAMBDA, DEFAULT_TAU, ROI_OUT};
use crate::detector::DetectorConfig;
use crate::error::{CmtError, Result};
use crate::mean_teacher::{DEFAULT_ALPHA, DEFAULT_GAMMA};
use crate::synth_data::{StrongAugConfig, WeakAugConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub tau: f64,
    pub lambda_contrast: f64,
    pub lambda_unsup_det: f64,
    pub lambda_sup_det: f64,
    pub gamma: f64,
    pub pseudo_nms_iou: f64,
    pub lr: f64,
    pub burn_in_iters: usize,
    pub max_iters: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub feature_levels: Vec<usize>,
    pub noise_fraction: f64,
    pub class_based_contrast: bool,
    pub multi_scale: bool,
    pub contrastive_enabled: bool,
    pub cutout_exclusion: bool,
    pub seed: u64,
    pub detector: DetectorConfig,
    pub weak_aug: WeakAugConfig,
    pub strong_aug: StrongAugConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: DEFAULT_ALPHA,
            tau: DEFAULT_TAU,
            lambda_contrast: DEFAULT_LAMBDA,
            lambda_unsup_det: 1.0,
            lambda_sup_det: 1.0,
            gamma: DEFAULT_GAMMA,
            pseudo_nms_iou: 0.5,
            lr: 0.01,
            burn_in_iters: 300,
            max_iters: 1500,
            batch_size: 4,
            eval_interval: 250,
            feature_levels: vec![0, 1, 2, 3],
            noise_fraction: 0.0,
            class_based_contrast: true,
            multi_scale: true,
            contrastive_enabled: true,
            cutout_exclusion: true,
            seed: 0,
            detector: DetectorConfig::default(),
            weak_aug: WeakAugConfig::default(),
            strong_aug: StrongAugConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Reduced schedule for quick experiments: narrower detector, fewer
    /// iterations and a faster-moving teacher.
    pub fn desk() -> Self {
        TrainConfig {
            alpha: 0.99,
            burn_in_iters: 300,
            max_iters: 400,
            batch_size: 2,
            eval_interval: 100,
            detector: DetectorConfig {
                widths: vec![8, 16, 32, 32],
                head_channels: 32,
                ..DetectorConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    /// Default hyper-parameters on a schedule that fits one run into ten
    /// CPU minutes: a longer source burn-in and a shorter adaptation phase.
    pub fn acceptance() -> Self {
        TrainConfig {
            burn_in_iters: 2000,
            max_iters: 600,
            eval_interval: 200,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(CmtError::ConfigInvalid(m.to_string()));
        if !(0.0..1.0).contains(&self.alpha) {
            return fail("alpha must lie in [0, 1)");
        }
        if !(self.tau > 0.0) || !(self.lr > 0.0) {
            return fail("tau and lr must be positive");
        }
        if [
            self.lambda_contrast,
            self.lambda_unsup_det,
            self.lambda_sup_det,
        ]
        .iter()
        .any(|l| !(*l >= 0.0))
        {
            return fail("loss weights must be nonnegative");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0)
            || !(self.pseudo_nms_iou > 0.0 && self.pseudo_nms_iou < 1.0)
        {
            return fail("gamma and pseudo_nms_iou must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return fail("noise_fraction must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return fail("batch_size and eval_interval must be positive");
        }
        if self.feature_levels.is_empty()
            || self
                .feature_levels
                .iter()
                .any(|&l| l >= self.detector.num_levels())
        {
            return fail("feature_levels must name backbone stages");
        }
        self.detector.validate()
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            tau: self.tau,
            lambda: 1.0,
            levels: self.feature_levels.clone(),
            class_based: self.class_based_contrast,
            multi_scale: self.multi_scale,
            out_size: ROI_OUT,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| CmtError::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CmtError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
