//! Runtime self-check suite: gradient checks and comparisons against the
//! independent references in [`crate::oracle`].

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::contrastive::{contrastive_loss, moco_loss};
use crate::detector::{
    detection_loss, nms, DensePrediction, Detection, DetectorConfig, DetectorParams,
};
use crate::evaluation::{average_precision, evaluate_detections, iou};
use crate::geometry::BBox;
use crate::mean_teacher::ema_update;
use crate::numerics::{grad_check, stack, Tape, Tensor, Var, DEFAULT_SAMPLES_PER_BIN};
use crate::oracle;
use crate::synth_data::SceneObject;

pub const GRAD_TOL: f64 = 1e-4;
pub const LOSS_TOL: f64 = 1e-10;
pub const ROI_TOL: f64 = 1e-9;
pub const EMA_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default)]
pub struct SelfcheckOptions {
    /// Shifts every RoI by a quarter pixel before pooling. Negative control
    /// for the RoIAlign comparison.
    pub perturb_roi_align: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub category: &'static str,
    pub name: String,
    pub passed: bool,
    /// Worst observed error or a short failure note.
    pub detail: String,
}

fn check(category: &'static str, name: &str, err: f64, tol: f64) -> CheckResult {
    CheckResult {
        category,
        name: name.to_string(),
        passed: err < tol,
        detail: format!("max err {err:.3e} (tol {tol:.0e})"),
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .expect("sized")
}

/// Values bounded away from zero so relu and max stay off their kinks.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn project<'t>(t: &'t Tape, v: Var<'t>, w: &Tensor) -> Var<'t> {
    v.flatten()
        .mul(&t.constant(w.clone()))
        .expect("projection length")
        .sum()
}

fn gradient_checks() -> Vec<CheckResult> {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|w| w.0 == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = off_kink(&mut rng, &[8]);
        let pos = uniform(&mut rng, &[8], 0.3, 2.0);
        let w8 = uniform(&mut rng, &[8], 0.5, 1.5);
        record(
            "relu",
            grad_check(|t, v| project(t, v.relu(), &w8), &x, 1e-6),
        );
        record("exp", grad_check(|t, v| project(t, v.exp(), &w8), &x, 1e-6));
        record(
            "log",
            grad_check(|t, v| project(t, v.log(), &w8), &pos, 1e-7),
        );
        record(
            "mul",
            grad_check(|t, v| project(t, v.mul(&v).unwrap(), &w8), &x, 1e-6),
        );
        record(
            "smooth_l1",
            grad_check(|t, v| project(t, v.smooth_l1(0.05), &w8), &x, 1e-6),
        );
        record(
            "l2_normalize",
            grad_check(|t, v| project(t, v.l2_normalize().unwrap(), &w8), &x, 1e-6),
        );

        let other = uniform(&mut rng, &[8], -1.0, 1.0);
        record(
            "add",
            grad_check(
                |t, v| {
                    project(
                        t,
                        v.add(&t.constant(other.clone())).unwrap().mul(&v).unwrap(),
                        &w8,
                    )
                },
                &x,
                1e-6,
            ),
        );
        record(
            "sub",
            grad_check(
                |t, v| {
                    project(
                        t,
                        t.constant(other.clone()).sub(&v).unwrap().mul(&v).unwrap(),
                        &w8,
                    )
                },
                &x,
                1e-6,
            ),
        );
        record(
            "scale",
            grad_check(
                |t, v| project(t, v.scale(-2.5).mul(&v).unwrap(), &w8),
                &x,
                1e-6,
            ),
        );
        record(
            "add_scalar",
            grad_check(|t, v| project(t, v.add_scalar(0.7).exp(), &w8), &x, 1e-6),
        );
        record("sum", grad_check(|_, v| v.mul(&v).unwrap().sum(), &x, 1e-6));
        record("mean", grad_check(|_, v| v.exp().mean(), &x, 1e-6));

        let a = uniform(&mut rng, &[2, 4], -1.0, 1.0);
        let b = uniform(&mut rng, &[4, 3], -1.0, 1.0);
        let w6 = uniform(&mut rng, &[6], 0.5, 1.5);
        let w8b = uniform(&mut rng, &[8], 0.5, 1.5);
        let w3 = uniform(&mut rng, &[3], 0.5, 1.5);
        let bias3 = uniform(&mut rng, &[3], -0.5, 0.5);
        record(
            "reshape",
            grad_check(
                |t, v| project(t, v.reshape([4, 2]).unwrap().exp(), &w8b),
                &a,
                1e-6,
            ),
        );
        record(
            "flatten",
            grad_check(|t, v| project(t, v.exp().flatten(), &w8b), &a, 1e-6),
        );
        let w16a = uniform(&mut rng, &[16], 0.5, 1.5);
        record(
            "transpose",
            grad_check(
                |t, v| {
                    project(
                        t,
                        v.transpose().unwrap().matmul(&v).unwrap().flatten(),
                        &w16a,
                    )
                },
                &a,
                1e-6,
            ),
        );
        let lw = uniform(&mut rng, &[3, 8], -1.0, 1.0);
        let w16 = uniform(&mut rng, &[16], 0.5, 1.5);
        record(
            "linear",
            grad_check(
                |t, v| {
                    project(
                        t,
                        v.linear(&t.constant(lw.clone()), &t.constant(bias3.clone()))
                            .unwrap()
                            .exp(),
                        &w3,
                    )
                },
                &x,
                1e-6,
            )
            .max(grad_check(
                |t, v| {
                    project(
                        t,
                        t.constant(x.clone())
                            .linear(&v, &t.constant(bias3.clone()))
                            .unwrap()
                            .exp(),
                        &w3,
                    )
                },
                &lw,
                1e-6,
            )),
        );
        record(
            "stack",
            grad_check(
                |t, v| project(t, stack(&[v.exp(), v.scale(2.0)]).unwrap().flatten(), &w16),
                &x,
                1e-6,
            ),
        );
        record(
            "matmul",
            grad_check(
                |t, v| project(t, v.matmul(&t.constant(b.clone())).unwrap(), &w6),
                &a,
                1e-6,
            ),
        );
        record(
            "log_softmax_rows",
            grad_check(
                |t, v| project(t, v.log_softmax_rows().unwrap(), &w8b),
                &a,
                1e-6,
            ),
        );

        let img = uniform(&mut rng, &[2, 6, 6], -1.0, 1.0);
        let k = uniform(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
        let bias = uniform(&mut rng, &[3], -0.1, 0.1);
        let w108 = uniform(&mut rng, &[108], 0.5, 1.5);
        record(
            "conv2d",
            grad_check(
                |t, v| {
                    project(
                        t,
                        v.conv2d(&t.constant(k.clone()), &t.constant(bias.clone()), 1, 1)
                            .unwrap(),
                        &w108,
                    )
                },
                &img,
                1e-6,
            ),
        );
        let pool_in = off_kink(&mut rng, &[1, 4, 4]);
        let w4 = uniform(&mut rng, &[4], 0.5, 1.5);
        record(
            "max_pool2d",
            grad_check(
                |t, v| project(t, v.max_pool2d().unwrap(), &w4),
                &pool_in,
                1e-7,
            ),
        );
        let map = uniform(&mut rng, &[2, 6, 6], -1.0, 1.0);
        let roi = [
            rng.gen_range(0.2..2.0),
            rng.gen_range(0.2..2.0),
            rng.gen_range(3.5..5.8),
            rng.gen_range(3.5..5.8),
        ];
        let w18 = uniform(&mut rng, &[18], 0.5, 1.5);
        record(
            "roi_align",
            grad_check(
                |t, v| {
                    project(
                        t,
                        v.roi_align(roi, 3, 3, DEFAULT_SAMPLES_PER_BIN).unwrap(),
                        &w18,
                    )
                },
                &map,
                1e-6,
            ),
        );
    }

    // Full class-based contrastive loss with respect to the student features.
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let n = rng.gen_range(2..=6);
        let d = 5;
        let zs = uniform(&mut rng, &[n, d], -1.0, 1.0);
        let zt: Vec<Tensor> = (0..n)
            .map(|_| Tensor::from_vec(unit(&mut rng, d)))
            .collect();
        let classes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let e = grad_check(
            |_, v| {
                let rows: Vec<Var> = (0..n)
                    .map(|i| {
                        let pick = v.tape().constant(one_hot_row(n, i));
                        pick.matmul(&v)
                            .unwrap()
                            .reshape([d])
                            .unwrap()
                            .l2_normalize()
                            .unwrap()
                    })
                    .collect();
                contrastive_loss(&rows, &zt, &classes, 0.2, 1.0).unwrap()
            },
            &zs,
            1e-6,
        );
        record("contrastive_loss", e);
    }

    // Detection loss with respect to every head and backbone weight.
    let cfg = DetectorConfig {
        widths: vec![2, 3, 3, 2],
        head_channels: 3,
        ..DetectorConfig::default()
    };
    let params = DetectorParams::init(&cfg, 5).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let img = uniform(&mut rng, &[3, 16, 16], 0.0, 1.0);
    let labels = vec![
        (BBox::new(1.0, 2.0, 9.0, 11.0), 1),
        (BBox::new(6.0, 5.0, 15.0, 15.0), 2),
    ];
    let mut det_worst: f64 = 0.0;
    for name in [
        "backbone.0.conv1.weight",
        "backbone.2.conv2.weight",
        "head.conv1.weight",
        "head.cls.weight",
        "head.reg.weight",
    ] {
        let e = grad_check(
            |t, v| {
                let mut vars = params.bind(t);
                vars.replace(name, v);
                let feats = crate::detector::forward_backbone(t.constant(img.clone()), &vars, &cfg)
                    .unwrap();
                let pred: DensePrediction =
                    crate::detector::forward_head(&feats, &vars, &cfg).unwrap();
                detection_loss(&pred, &labels).unwrap()
            },
            params.get(name).expect("named weight"),
            1e-5,
        );
        det_worst = det_worst.max(e);
    }
    record("detection_loss", det_worst);

    worst
        .into_iter()
        .map(|(name, e)| check("gradient", name, e, GRAD_TOL))
        .collect()
}

/// `[1, n]` selector picking row `i` out of an `[n, d]` matrix.
fn one_hot_row(n: usize, i: usize) -> Tensor {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    Tensor::new([1, n], v).expect("sized")
}

fn contrastive_checks() -> Vec<CheckResult> {
    let (mut class_err, mut moco_err, mut agree_err) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.gen_range(1..=8);
        let d = rng.gen_range(2..=6);
        let tau = rng.gen_range(0.05..1.0);
        let lambda = rng.gen_range(0.1..2.0);
        let zs: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, d)).collect();
        let zt: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, d)).collect();
        let classes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let tape = Tape::no_grad();
        let zs_v: Vec<Var> = zs
            .iter()
            .map(|z| tape.constant(Tensor::from_vec(z.clone())))
            .collect();
        let zt_t: Vec<Tensor> = zt.iter().map(|z| Tensor::from_vec(z.clone())).collect();

        let got = contrastive_loss(&zs_v, &zt_t, &classes, tau, lambda)
            .unwrap()
            .item();
        let want = oracle::contrastive_double_loop(&zs, &zt, &classes, tau, lambda);
        class_err = class_err.max((got - want).abs());

        if n >= 2 {
            let got = moco_loss(&zs_v, &zt_t, tau).unwrap().item();
            moco_err = moco_err.max((got - oracle::moco_cross_entropy(&zs, &zt, tau)).abs());
            let distinct: Vec<usize> = (0..n).collect();
            let cl = contrastive_loss(&zs_v, &zt_t, &distinct, tau, 1.0)
                .unwrap()
                .item();
            agree_err = agree_err.max((cl - got).abs());
        }
    }
    vec![
        check(
            "contrastive-oracle",
            "class_based_vs_double_loop",
            class_err,
            LOSS_TOL,
        ),
        check("moco-oracle", "moco_vs_cross_entropy", moco_err, LOSS_TOL),
        check(
            "moco-oracle",
            "distinct_classes_equal_moco",
            agree_err,
            1e-12,
        ),
    ]
}

fn roi_align_checks(opts: SelfcheckOptions) -> Vec<CheckResult> {
    let mut worst: f64 = 0.0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (h, w) = (rng.gen_range(3..9), rng.gen_range(3..9));
        let map = uniform(&mut rng, &[2, h, w], -1.0, 1.0);
        // Boxes may extend up to two cells past every border.
        let x1 = rng.gen_range(-2.0..w as f64);
        let y1 = rng.gen_range(-2.0..h as f64);
        let bbox = [
            x1,
            y1,
            x1 + rng.gen_range(0.5..5.0),
            y1 + rng.gen_range(0.5..5.0),
        ];
        let out = rng.gen_range(1..4);
        let mut used = bbox;
        if opts.perturb_roi_align {
            used[0] += 0.25;
        }
        let tape = Tape::no_grad();
        let got = tape
            .constant(map.clone())
            .roi_align(used, out, out, DEFAULT_SAMPLES_PER_BIN)
            .unwrap()
            .to_tensor();
        let want = oracle::roi_align_dense(&map, bbox, out, out, DEFAULT_SAMPLES_PER_BIN);
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    vec![check(
        "roi-align-oracle",
        "roi_align_vs_dense_bilinear",
        worst,
        ROI_TOL,
    )]
}

fn ema_checks() -> Vec<CheckResult> {
    let cfg = DetectorConfig {
        widths: vec![2, 2, 2, 2],
        head_channels: 2,
        ..DetectorConfig::default()
    };
    let student = DetectorParams::init(&cfg, 1).expect("valid config");
    let teacher0 = DetectorParams::init(&cfg, 2).expect("valid config");
    let d0 = teacher0.distance(&student);
    let mut worst: f64 = 0.0;
    for alpha in [0.0, 0.5, 0.9996] {
        let mut teacher = teacher0.clone();
        for step in 1..=10 {
            ema_update(&mut teacher, &student, alpha).expect("compatible");
            let want = alpha.powi(step) * d0;
            let got = teacher.distance(&student);
            let rel = if want == 0.0 {
                got
            } else {
                (got - want).abs() / want
            };
            worst = worst.max(rel);
        }
    }
    vec![check("ema-decay", "geometric_decay", worst, EMA_TOL)]
}

fn box_checks() -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(3000);
    let rand_box = |rng: &mut ChaCha8Rng| {
        let x = rng.gen_range(0.0..50.0);
        let y = rng.gen_range(0.0..50.0);
        [
            x,
            y,
            x + rng.gen_range(1.0..20.0),
            y + rng.gen_range(1.0..20.0),
        ]
    };
    let mut iou_err: f64 = 0.0;
    for _ in 0..200 {
        let (a, b) = (rand_box(&mut rng), rand_box(&mut rng));
        let got = iou(
            &BBox::new(a[0], a[1], a[2], a[3]),
            &BBox::new(b[0], b[1], b[2], b[3]),
        )
        .unwrap();
        iou_err = iou_err.max((got - oracle::iou_intervals(a, b)).abs());
    }
    let mut nms_mismatch = 0;
    for _ in 0..50 {
        let n = rng.gen_range(1..10);
        let boxes: Vec<[f64; 4]> = (0..n).map(|_| rand_box(&mut rng)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let classes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let dets: Vec<Detection> = (0..n)
            .map(|i| Detection {
                bbox: BBox::new(boxes[i][0], boxes[i][1], boxes[i][2], boxes[i][3]),
                class_id: classes[i],
                score: scores[i],
                cell: i,
            })
            .collect();
        let got: Vec<usize> = nms(dets, 0.5).iter().map(|d| d.cell).collect();
        if got != oracle::nms_reference(&boxes, &scores, &classes, 0.5) {
            nms_mismatch += 1;
        }
    }
    vec![
        check("iou-nms-oracle", "iou_vs_intervals", iou_err, 1e-12),
        CheckResult {
            category: "iou-nms-oracle",
            name: "nms_vs_greedy_reference".into(),
            passed: nms_mismatch == 0,
            detail: format!("{nms_mismatch} of 50 fixtures differ"),
        },
    ]
}

fn map_checks() -> Vec<CheckResult> {
    let ap = average_precision(&[(0.9, true), (0.8, false), (0.7, true)], 2);
    let obj = |c, x: f64| SceneObject {
        class_id: c,
        bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
    };
    let det = |c, x: f64, s| Detection {
        bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
        class_id: c,
        score: s,
        cell: 0,
    };
    let gts = vec![vec![obj(0, 0.0), obj(1, 20.0)]];
    let dets = vec![vec![det(0, 0.0, 0.9), det(1, 20.0, 0.8)]];
    let perfect = evaluate_detections(&dets, &gts, 3)
        .map(|r| r.map50)
        .unwrap_or(f64::NAN);
    vec![
        check(
            "map-fixture",
            "ap_five_sixths",
            (ap - 5.0 / 6.0).abs(),
            1e-12,
        ),
        check(
            "map-fixture",
            "oracle_detections_map_one",
            (perfect - 1.0).abs(),
            1e-12,
        ),
    ]
}

/// Runs every check. Order is stable.
pub fn run_selfcheck(opts: SelfcheckOptions) -> Vec<CheckResult> {
    let mut out = gradient_checks();
    out.extend(contrastive_checks());
    out.extend(roi_align_checks(opts));
    out.extend(ema_checks());
    out.extend(box_checks());
    out.extend(map_checks());
    out
}

pub fn render_table(results: &[CheckResult]) -> String {
    let width = results
        .iter()
        .map(|r| r.category.len() + r.name.len() + 1)
        .max()
        .unwrap_or(0);
    let mut s = String::new();
    for r in results {
        let label = format!("{}/{}", r.category, r.name);
        s.push_str(&format!(
            "{} {label:<width$}  {}\n",
            if r.passed { "PASS" } else { "FAIL" },
            r.detail
        ));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    s.push_str(&format!("{} checks, {} failed\n", results.len(), failed));
    s
}
