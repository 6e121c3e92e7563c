use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::BBox;
use crate::numerics::{grad_check, Tape, Tensor};
use crate::oracle::nms_reference;

fn small_cfg() -> DetectorConfig {
    DetectorConfig {
        num_classes: 3,
        in_channels: 3,
        widths: vec![2, 3, 3, 2],
        head_channels: 3,
        head_level: 2,
    }
}

fn random_image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        [3, h, w],
        (0..3 * h * w).map(|_| rng.gen::<f64>()).collect(),
    )
    .unwrap()
}

fn pred_from(
    logits: Vec<f64>,
    offsets: Vec<f64>,
    k: usize,
    hp: usize,
    wp: usize,
    stride: usize,
) -> PredictionValues {
    PredictionValues {
        logits: Tensor::new([k, hp, wp], logits).unwrap(),
        offsets: Tensor::new([4, hp, wp], offsets).unwrap(),
        stride,
    }
}

#[test]
fn backbone_map_sizes_and_strides() {
    let cfg = DetectorConfig::default();
    let params = DetectorParams::init(&cfg, 1).unwrap();
    let tape = Tape::no_grad();
    let (_, fwd) = forward(&tape, &random_image(0, 64, 64), &params, &cfg).unwrap();
    let sizes: Vec<Vec<usize>> = fwd.features.maps.iter().map(|m| m.shape()).collect();
    assert_eq!(
        sizes,
        vec![
            vec![16, 32, 32],
            vec![32, 16, 16],
            vec![64, 8, 8],
            vec![64, 4, 4]
        ]
    );
    assert_eq!(fwd.features.strides, vec![2, 4, 8, 16]);
    assert_eq!(fwd.prediction.logits.shape(), vec![4, 8, 8]);
    assert_eq!(fwd.prediction.offsets.shape(), vec![4, 8, 8]);
    assert_eq!(fwd.prediction.stride, 8);
}

#[test]
fn zero_weights_give_zero_features_and_uniform_head() {
    let cfg = small_cfg();
    let params = DetectorParams::zeros(&cfg);
    let tape = Tape::no_grad();
    let (_, fwd) = forward(&tape, &random_image(3, 32, 32), &params, &cfg).unwrap();
    for m in fwd.features.to_tensors() {
        assert!(m.data().iter().all(|&v| v == 0.0));
    }
    let p = fwd.prediction.values();
    assert!(p.logits.data().iter().all(|&v| v == 0.0));
    assert!(p.offsets.data().iter().all(|&v| v == 1.0));
}

#[test]
fn wrong_input_channels_rejected() {
    let cfg = small_cfg();
    let params = DetectorParams::init(&cfg, 0).unwrap();
    let img = Tensor::zeros([1, 16, 16]);
    assert!(predict(&img, &params, &cfg).is_err());
}

#[test]
fn forward_is_deterministic_and_golden() {
    let cfg = DetectorConfig::default();
    let params = DetectorParams::init(&cfg, 42).unwrap();
    let img = random_image(7, 64, 64);
    let run = || {
        let tape = Tape::no_grad();
        let (_, fwd) = forward(&tape, &img, &params, &cfg).unwrap();
        fwd.features
            .to_tensors()
            .iter()
            .map(|t| {
                t.data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * (1.0 + (i % 7) as f64))
                    .sum::<f64>()
            })
            .collect::<Vec<f64>>()
    };
    let a = run();
    assert_eq!(a, run());
    let golden = [GOLDEN_L0, GOLDEN_L1, GOLDEN_L2, GOLDEN_L3];
    for (got, want) in a.iter().zip(golden) {
        assert!(
            (got - want).abs() <= 1e-9 * want.abs().max(1.0),
            "checksum {got:.12} vs {want:.12}"
        );
    }
}

// Recorded from the first verified build.
const GOLDEN_L0: f64 = 22188.705056587736;
const GOLDEN_L1: f64 = 13791.086287064854;
const GOLDEN_L2: f64 = 7791.693677250895;
const GOLDEN_L3: f64 = 2126.772826071373;

#[test]
fn init_is_seeded_and_bounded() {
    let cfg = DetectorConfig::default();
    let a = DetectorParams::init(&cfg, 5).unwrap();
    assert_eq!(a, DetectorParams::init(&cfg, 5).unwrap());
    assert_ne!(a, DetectorParams::init(&cfg, 6).unwrap());
    let w = a.get("backbone.1.conv1.weight").unwrap();
    let bound = (INIT_GAIN / (16.0 * 9.0)).sqrt();
    assert!(w.data().iter().all(|v| v.abs() <= bound));
    assert!(a.is_finite());
    a.check_compatible(&DetectorParams::zeros(&cfg)).unwrap();
}

#[test]
fn logit_sum_gradient_wrt_backbone_weights() {
    let cfg = small_cfg();
    let params = DetectorParams::init(&cfg, 11).unwrap();
    let img = random_image(12, 16, 16);
    for name in ["backbone.0.conv1.weight", "backbone.2.conv2.bias"] {
        let x = params.get(name).unwrap().clone();
        let err = grad_check(
            |t, w| {
                let mut vars = params.bind(t);
                vars_override(&mut vars, name, w);
                let input = t.constant(img.clone());
                let feats = forward_backbone(input, &vars, &cfg).unwrap();
                forward_head(&feats, &vars, &cfg).unwrap().logits.sum()
            },
            &x,
            1e-6,
        );
        assert!(err < 1e-4, "{name}: {err}");
    }
}

fn vars_override<'t>(vars: &mut ParamVars<'t>, name: &str, v: crate::numerics::Var<'t>) {
    vars.replace(name, v);
}

#[test]
fn detection_loss_gradient_for_every_weight() {
    let cfg = small_cfg();
    let params = DetectorParams::init(&cfg, 21).unwrap();
    let img = random_image(22, 16, 16);
    let labels = vec![
        (BBox::new(1.0, 2.0, 9.5, 12.0), 1),
        (BBox::new(6.0, 6.0, 15.0, 15.0), 2),
    ];
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let x = params.get(name).unwrap().clone();
        let err = grad_check(
            |t, w| {
                let mut vars = params.bind(t);
                vars_override(&mut vars, name, w);
                let feats = forward_backbone(t.constant(img.clone()), &vars, &cfg).unwrap();
                let pred = forward_head(&feats, &vars, &cfg).unwrap();
                detection_loss(&pred, &labels).unwrap()
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn decode_all_background_is_empty() {
    let (hp, wp) = (2, 2);
    let mut logits = vec![0.0; 4 * 4];
    for cell in 0..4 {
        logits[3 * 4 + cell] = 5.0;
    }
    let p = pred_from(logits, vec![2.0; 16], 4, hp, wp, 8);
    assert!(decode(&p, &DecodeConfig::EVAL).is_empty());
}

#[test]
fn decode_reconstructs_boxes_from_cell_centers() {
    let mut logits = vec![0.0; 4];
    logits[1] = 4.0;
    let p = pred_from(logits, vec![2.0, 1.0, 3.0, 2.5], 4, 1, 1, 8);
    let d = decode(&p, &DecodeConfig::EVAL);
    assert_eq!(d.len(), 1);
    assert_eq!(d[0].bbox, BBox::new(2.0, 3.0, 7.0, 6.5));
    assert_eq!(d[0].class_id, 1);
    let e4 = 4f64.exp();
    assert!((d[0].score - e4 / (e4 + 3.0)).abs() < 1e-15);
}

fn dets(boxes: &[[f64; 4]], scores: &[f64], classes: &[usize]) -> Vec<Detection> {
    boxes
        .iter()
        .zip(scores)
        .zip(classes)
        .enumerate()
        .map(|(i, ((b, &s), &c))| Detection {
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
            class_id: c,
            score: s,
            cell: i,
        })
        .collect()
}

#[test]
fn nms_identical_boxes() {
    let b = [0.0, 0.0, 10.0, 10.0];
    let out = nms(dets(&[b, b], &[0.8, 0.9], &[0, 0]), 0.5);
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].score, 0.9);
    let out = nms(dets(&[b, b], &[0.8, 0.9], &[0, 1]), 0.5);
    assert_eq!(out.len(), 2);
}

#[test]
fn nms_three_box_fixture_matches_oracle() {
    // Pairwise IoUs: (A,B) = 0.6, (B,C) = 0.3, (A,C) = 0.1 within rounding.
    let a = [0.0, 0.0, 10.0, 10.0];
    let b = [2.5, 0.0, 12.5, 10.0];
    let c = [8.0, 0.0, 18.0, 10.0];
    let boxes = [a, b, c];
    for scores in [
        [0.9, 0.8, 0.7],
        [0.7, 0.9, 0.8],
        [0.8, 0.7, 0.9],
        [0.5, 0.5, 0.5],
    ] {
        for thresh in [0.05, 0.2, 0.5, 0.65] {
            let got: Vec<usize> = nms(dets(&boxes, &scores, &[0, 0, 0]), thresh)
                .iter()
                .map(|d| d.cell)
                .collect();
            assert_eq!(
                got,
                nms_reference(&boxes, &scores, &[0, 0, 0], thresh),
                "scores {scores:?} thresh {thresh}"
            );
        }
    }
}

#[test]
fn max_dets_caps_output() {
    let k = 4;
    let (hp, wp) = (4, 4);
    let m = hp * wp;
    let mut logits = vec![0.0; k * m];
    for cell in 0..m {
        logits[cell] = 3.0 + cell as f64 * 0.01;
    }
    let p = pred_from(logits, vec![1.0; 4 * m], k, hp, wp, 8);
    let cfg = DecodeConfig {
        score_thresh: 0.05,
        nms_iou: 0.5,
        max_dets: 5,
    };
    let d = decode(&p, &cfg);
    assert_eq!(d.len(), 5);
    assert!(d.windows(2).all(|w| w[0].score >= w[1].score));
    assert_eq!(decode(&p, &cfg), d);
}

/// Independent per-cell reimplementation of the detection loss.
fn loss_oracle(p: &PredictionValues, labels: &[(BBox, usize)]) -> f64 {
    let (hp, wp) = p.grid();
    let k = p.logits.shape()[0];
    let s = p.stride as f64;
    let mut ce = 0.0;
    let mut reg = 0.0;
    let mut npos = 0;
    for row in 0..hp {
        for col in 0..wp {
            let (cx, cy) = ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s);
            let mut best: Option<&(BBox, usize)> = None;
            for l in labels {
                let inside = cx >= l.0.x1 && cx <= l.0.x2 && cy >= l.0.y1 && cy <= l.0.y2;
                if inside && best.map_or(true, |b| l.0.area() < b.0.area()) {
                    best = Some(l);
                }
            }
            let z: Vec<f64> = (0..k)
                .map(|c| p.logits.data()[(c * hp + row) * wp + col])
                .collect();
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            let target = best.map_or(k - 1, |b| b.1);
            ce += lse - z[target];
            if let Some((b, _)) = best {
                npos += 1;
                let t = [cx - b.x1, cy - b.y1, b.x2 - cx, b.y2 - cy];
                for (ch, tv) in t.iter().enumerate() {
                    let d = (p.offsets.data()[(ch * hp + row) * wp + col] - tv) / s;
                    reg += if d.abs() < 1.0 {
                        0.5 * d * d
                    } else {
                        d.abs() - 0.5
                    };
                }
            }
        }
    }
    let n = (hp * wp) as f64;
    ce / n
        + if npos > 0 {
            reg / (4 * npos) as f64
        } else {
            0.0
        }
}

fn loss_of(p: &PredictionValues, labels: &[(BBox, usize)]) -> f64 {
    let tape = Tape::new();
    let pred = DensePrediction {
        logits: tape.param(p.logits.clone()),
        offsets: tape.param(p.offsets.clone()),
        stride: p.stride,
    };
    detection_loss(&pred, labels).unwrap().item()
}

#[test]
fn loss_matches_per_cell_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20 {
        let (hp, wp, k) = (rng.gen_range(1..6), rng.gen_range(1..6), 4);
        let logits = (0..k * hp * wp).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let offsets = (0..4 * hp * wp).map(|_| rng.gen_range(0.1..30.0)).collect();
        let p = pred_from(logits, offsets, k, hp, wp, 8);
        let labels: Vec<(BBox, usize)> = (0..rng.gen_range(0..4))
            .map(|_| {
                let x = rng.gen_range(0.0..30.0);
                let y = rng.gen_range(0.0..30.0);
                (
                    BBox::new(
                        x,
                        y,
                        x + rng.gen_range(4.0..25.0),
                        y + rng.gen_range(4.0..25.0),
                    ),
                    rng.gen_range(0..3),
                )
            })
            .collect();
        let got = loss_of(&p, &labels);
        assert!((got - loss_oracle(&p, &labels)).abs() < 1e-9);
    }
}

#[test]
fn uniform_logits_give_ln4() {
    let p = pred_from(vec![0.0; 4 * 9], vec![1.0; 4 * 9], 4, 3, 3, 8);
    assert!((loss_of(&p, &[]) - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn loss_at_optimum() {
    // One cell at center (4, 4); label box (1, 2, 9, 7) gives offsets 3, 2, 5, 3.
    let mut logits = vec![-40.0; 4];
    logits[2] = 40.0;
    let p = pred_from(logits, vec![3.0, 2.0, 5.0, 3.0], 4, 1, 1, 8);
    let l = loss_of(&p, &[(BBox::new(1.0, 2.0, 9.0, 7.0), 2)]);
    assert!(l < 1e-6);
}

#[test]
fn smallest_box_wins_assignment() {
    let big = (BBox::new(0.0, 0.0, 32.0, 32.0), 0);
    let small = (BBox::new(8.0, 8.0, 16.0, 16.0), 1);
    let t = assign_targets(&[big, small], (4, 4), 8, 3);
    assert_eq!(t.classes[5], 1);
    assert_eq!(t.classes[0], 0);
    assert_eq!(t.num_positive, 16);
}

proptest! {
    #[test]
    fn loss_nonnegative_and_decode_stable(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (hp, wp) = (3, 3);
        let logits = (0..4 * 9).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let offsets = (0..4 * 9).map(|_| rng.gen_range(0.1..20.0)).collect();
        let p = pred_from(logits, offsets, 4, hp, wp, 8);
        let labels = vec![(BBox::new(1.0, 1.0, 15.0, 20.0), 0)];
        prop_assert!(loss_of(&p, &labels) >= 0.0);
        prop_assert!(loss_of(&p, &[]) >= 0.0);
        let cfg = DecodeConfig { score_thresh: 0.2, nms_iou: 0.4, max_dets: 5 };
        prop_assert_eq!(decode(&p, &cfg), decode(&p, &cfg));
    }
}
