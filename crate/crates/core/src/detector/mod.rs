//! Toy anchor-free dense detector: a strided conv backbone, a per-cell
//! classification/regression head, decoding with NMS, and the supervised loss.

mod decode;
mod loss;
mod model;
mod params;

pub use decode::{candidates, cell_probs, decode, nms, DecodeConfig, Detection};
pub use loss::{assign_targets, detection_loss, CellTargets, SMOOTH_L1_BETA};
pub use model::{
    forward, forward_backbone, forward_head, predict, BackboneFeatures, DensePrediction, Forward,
    PredictionValues,
};
pub use params::{DetectorConfig, DetectorParams, ParamVars, INIT_GAIN};

#[cfg(test)]
mod tests;
