use super::DensePrediction;
use crate::error::Result;
use crate::geometry::BBox;
use crate::numerics::{Tensor, Var};

/// Transition point of the smooth-L1 regression loss, in stride units.
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Per-cell training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct CellTargets {
    /// Class index per cell (background = `num_classes`).
    pub classes: Vec<usize>,
    /// `[4 * M]` channel-major l/t/r/b distances; zero for background cells.
    pub offsets: Vec<f64>,
    pub num_positive: usize,
}

/// Assigns each cell to the smallest-area label box containing its center.
pub fn assign_targets(
    labels: &[(BBox, usize)],
    grid: (usize, usize),
    stride: usize,
    background: usize,
) -> CellTargets {
    let (hp, wp) = grid;
    let m = hp * wp;
    let s = stride as f64;
    let mut classes = vec![background; m];
    let mut offsets = vec![0.0; 4 * m];
    let mut num_positive = 0;
    for cell in 0..m {
        let (cx, cy) = (
            ((cell % wp) as f64 + 0.5) * s,
            ((cell / wp) as f64 + 0.5) * s,
        );
        let best = labels
            .iter()
            .filter(|(b, _)| b.contains(cx, cy))
            .min_by(|a, b| a.0.area().total_cmp(&b.0.area()));
        if let Some((b, c)) = best {
            classes[cell] = *c;
            offsets[cell] = cx - b.x1;
            offsets[m + cell] = cy - b.y1;
            offsets[2 * m + cell] = b.x2 - cx;
            offsets[3 * m + cell] = b.y2 - cy;
            num_positive += 1;
        }
    }
    CellTargets {
        classes,
        offsets,
        num_positive,
    }
}

/// Mean cross-entropy over all cells plus mean smooth-L1 over the offset
/// channels of positive cells. Offsets are compared in units of the stride.
pub fn detection_loss<'t>(pred: &DensePrediction<'t>, labels: &[(BBox, usize)]) -> Result<Var<'t>> {
    let shape = pred.logits.shape();
    let (k, hp, wp) = (shape[0], shape[1], shape[2]);
    let m = hp * wp;
    let tape = pred.logits.tape();
    let targets = assign_targets(labels, (hp, wp), pred.stride, k - 1);

    let mut onehot = vec![0.0; m * k];
    for (cell, &c) in targets.classes.iter().enumerate() {
        onehot[cell * k + c] = 1.0;
    }
    let rows = pred
        .logits
        .reshape([k, m])?
        .transpose()?
        .log_softmax_rows()?;
    let ce = rows
        .mul(&tape.constant(Tensor::new([m, k], onehot)?))?
        .sum()
        .scale(-1.0 / m as f64);
    if targets.num_positive == 0 {
        return Ok(ce);
    }

    let mut mask = vec![0.0; 4 * m];
    for (cell, &c) in targets.classes.iter().enumerate() {
        if c != k - 1 {
            for ch in 0..4 {
                mask[ch * m + cell] = 1.0;
            }
        }
    }
    let inv_stride = 1.0 / pred.stride as f64;
    let diff = pred
        .offsets
        .reshape([4, m])?
        .sub(&tape.constant(Tensor::new([4, m], targets.offsets)?))?
        .scale(inv_stride);
    let reg = diff
        .smooth_l1(SMOOTH_L1_BETA)
        .mul(&tape.constant(Tensor::new([4, m], mask)?))?
        .sum()
        .scale(1.0 / (4 * targets.num_positive) as f64);
    ce.add(&reg)
}
