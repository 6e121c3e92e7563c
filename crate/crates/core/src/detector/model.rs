use serde::{Deserialize, Serialize};

use super::{DetectorConfig, DetectorParams, ParamVars};
use crate::error::{CmtError, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Backbone outputs, one map per stage.
pub struct BackboneFeatures<'t> {
    pub maps: Vec<Var<'t>>,
    pub strides: Vec<usize>,
}

impl<'t> BackboneFeatures<'t> {
    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.maps.iter().map(Var::to_tensor).collect()
    }
}

/// Dense per-cell outputs at the head stride.
pub struct DensePrediction<'t> {
    /// `[C+1, Hp, Wp]`; the last channel is background.
    pub logits: Var<'t>,
    /// `[4, Hp, Wp]` distances to the left/top/right/bottom edges in pixels.
    pub offsets: Var<'t>,
    pub stride: usize,
}

impl<'t> DensePrediction<'t> {
    pub fn values(&self) -> PredictionValues {
        PredictionValues {
            logits: self.logits.to_tensor(),
            offsets: self.offsets.to_tensor(),
            stride: self.stride,
        }
    }
}

/// Tape-free copy of a [`DensePrediction`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionValues {
    pub logits: Tensor,
    pub offsets: Tensor,
    pub stride: usize,
}

impl PredictionValues {
    pub fn grid(&self) -> (usize, usize) {
        (self.logits.shape()[1], self.logits.shape()[2])
    }
}

/// Per-channel image mean broadcast to the image shape. The backbone
/// subtracts it from its input; gradients do not flow through the mean.
pub fn channel_means(img: &Tensor) -> Tensor {
    let shape = img.shape();
    let hw: usize = shape[1..].iter().product();
    let mut out = img.data().to_vec();
    for plane in out.chunks_mut(hw.max(1)) {
        let m = plane.iter().sum::<f64>() / hw as f64;
        plane.fill(m);
    }
    Tensor::new(shape.to_vec(), out).expect("shape preserved")
}

pub fn forward_backbone<'t>(
    img: Var<'t>,
    params: &ParamVars<'t>,
    cfg: &DetectorConfig,
) -> Result<BackboneFeatures<'t>> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != cfg.in_channels {
        return Err(CmtError::ShapeMismatch(format!(
            "backbone expects [{}, H, W], got {shape:?}",
            cfg.in_channels
        )));
    }
    let means = channel_means(&img.to_tensor());
    let mut x = img.sub(&img.tape().constant(means))?;
    let mut maps = Vec::with_capacity(cfg.num_levels());
    let mut strides = Vec::with_capacity(cfg.num_levels());
    for s in 0..cfg.num_levels() {
        let p = |n: &str| params.get(&format!("backbone.{s}.{n}"));
        x = x
            .conv2d(&p("conv1.weight")?, &p("conv1.bias")?, 1, 1)?
            .relu();
        x = x
            .conv2d(&p("conv2.weight")?, &p("conv2.bias")?, 1, 1)?
            .relu();
        x = x.max_pool2d()?;
        maps.push(x);
        strides.push(DetectorConfig::level_stride(s));
    }
    Ok(BackboneFeatures { maps, strides })
}

pub fn forward_head<'t>(
    features: &BackboneFeatures<'t>,
    params: &ParamVars<'t>,
    cfg: &DetectorConfig,
) -> Result<DensePrediction<'t>> {
    let x = *features
        .maps
        .get(cfg.head_level)
        .ok_or_else(|| CmtError::ShapeMismatch(format!("no backbone level {}", cfg.head_level)))?;
    let h = x
        .conv2d(
            &params.get("head.conv1.weight")?,
            &params.get("head.conv1.bias")?,
            1,
            1,
        )?
        .relu();
    let h = h
        .conv2d(
            &params.get("head.conv2.weight")?,
            &params.get("head.conv2.bias")?,
            1,
            1,
        )?
        .relu();
    let logits = h.conv2d(
        &params.get("head.cls.weight")?,
        &params.get("head.cls.bias")?,
        1,
        0,
    )?;
    let offsets = h
        .conv2d(
            &params.get("head.reg.weight")?,
            &params.get("head.reg.bias")?,
            1,
            0,
        )?
        .exp();
    Ok(DensePrediction {
        logits,
        offsets,
        stride: features.strides[cfg.head_level],
    })
}

/// Backbone maps and head prediction from one forward pass.
pub struct Forward<'t> {
    pub features: BackboneFeatures<'t>,
    pub prediction: DensePrediction<'t>,
}

/// Full forward pass on `tape`; weights are bound as trainable leaves iff
/// the tape records.
pub fn forward<'t>(
    tape: &'t Tape,
    img: &Tensor,
    params: &DetectorParams,
    cfg: &DetectorConfig,
) -> Result<(ParamVars<'t>, Forward<'t>)> {
    let vars = params.bind(tape);
    let x = tape.constant(img.clone());
    let features = forward_backbone(x, &vars, cfg)?;
    let prediction = forward_head(&features, &vars, cfg)?;
    Ok((
        vars,
        Forward {
            features,
            prediction,
        },
    ))
}

/// Tape-free inference.
pub fn predict(
    img: &Tensor,
    params: &DetectorParams,
    cfg: &DetectorConfig,
) -> Result<PredictionValues> {
    let tape = Tape::no_grad();
    let (_, fwd) = forward(&tape, img, params, cfg)?;
    Ok(fwd.prediction.values())
}
