use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::CmtError;
use crate::oracle;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero so relu/abs kinks are never straddled.
fn nonzero_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn projection<'t>(tape: &'t Tape, y: Var<'t>, weights: &Tensor) -> Var<'t> {
    let w = tape.constant(weights.clone().reshape(y.shape()).unwrap());
    y.mul(&w).unwrap().sum()
}

#[test]
fn l2_normalize_examples() {
    let tape = Tape::new();
    let v = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let out = v.l2_normalize().unwrap().to_tensor();
    assert!((out.data()[0] - 0.6).abs() < 1e-15);
    assert!((out.data()[1] - 0.8).abs() < 1e-15);

    let u = tape.constant(Tensor::from_vec(vec![1.0, 0.0, 0.0]));
    assert_eq!(
        u.l2_normalize().unwrap().to_tensor().data(),
        &[1.0, 0.0, 0.0]
    );
}

#[test]
fn l2_normalize_rejects_tiny_vectors() {
    let tape = Tape::new();
    let v = tape.constant(Tensor::from_vec(vec![1e-13, 0.0]));
    assert!(matches!(
        v.l2_normalize(),
        Err(CmtError::NearZeroNorm { .. })
    ));
    let z = tape.constant(Tensor::zeros(vec![4]));
    assert!(matches!(
        z.l2_normalize(),
        Err(CmtError::NearZeroNorm { .. })
    ));
}

#[test]
fn l2_normalize_random_unit_norm_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_tensor(&mut rng, &[8], -2.0, 2.0);
    let tape = Tape::no_grad();
    let n = tape
        .constant(x.clone())
        .l2_normalize()
        .unwrap()
        .to_tensor()
        .norm();
    assert!((n - 1.0).abs() < 1e-12);

    let dir = random_tensor(&mut rng, &[8], 0.5, 1.5);
    let err = grad_check(
        |t, v| projection(t, v.l2_normalize().unwrap(), &dir),
        &x,
        1e-5,
    );
    assert!(err < 1e-5, "l2_normalize grad error {err}");
}

#[test]
fn l2_normalize_dot_with_unit_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, &[6], 0.1, 1.0);
    let u = {
        let raw = random_tensor(&mut rng, &[6], -1.0, 1.0);
        let n = raw.norm();
        raw.map(|v| v / n)
    };
    let err = grad_check(
        |t, v| projection(t, v.l2_normalize().unwrap(), &u),
        &x,
        1e-5,
    );
    assert!(err < 1e-5, "{err}");
}

#[test]
fn conv2d_sum_of_ones() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::full(vec![1, 3, 3], 1.0));
    let w = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let b = tape.constant(Tensor::zeros(vec![1]));
    let y = x.conv2d(&w, &b, 1, 0).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 1]);
    assert_eq!(y.item(), 9.0);
}

#[test]
fn conv2d_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xt = random_tensor(&mut rng, &[1, 4, 5], -1.0, 1.0);
    let tape = Tape::new();
    let x = tape.constant(xt.clone());
    let w = tape.constant(Tensor::full(vec![1, 1, 1, 1], 1.0));
    let b = tape.constant(Tensor::zeros(vec![1]));
    let y = x.conv2d(&w, &b, 1, 0).unwrap();
    assert_eq!(y.to_tensor(), xt);
}

#[test]
fn conv2d_output_extent_and_channel_check() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![2, 7, 6]));
    let w = tape.constant(Tensor::zeros(vec![3, 2, 3, 3]));
    let b = tape.constant(Tensor::zeros(vec![3]));
    assert_eq!(x.conv2d(&w, &b, 2, 1).unwrap().shape(), vec![3, 4, 3]);

    let bad = tape.constant(Tensor::zeros(vec![3, 1, 3, 3]));
    assert!(matches!(
        x.conv2d(&bad, &b, 1, 1),
        Err(CmtError::ShapeMismatch(_))
    ));
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[2, 5, 5], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[3], -1.0, 1.0);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let (wc, bc) = (w.clone(), b.clone());
        let ex = grad_check(
            move |t, v| {
                v.conv2d(
                    &t.constant(wc.clone()),
                    &t.constant(bc.clone()),
                    stride,
                    pad,
                )
                .unwrap()
                .sum()
            },
            &x,
            1e-6,
        );
        let (xc, bc) = (x.clone(), b.clone());
        let ew = grad_check(
            move |t, v| {
                t.constant(xc.clone())
                    .conv2d(&v, &t.constant(bc.clone()), stride, pad)
                    .unwrap()
                    .sum()
            },
            &w,
            1e-6,
        );
        let (xc, wc) = (x.clone(), w.clone());
        let eb = grad_check(
            move |t, v| {
                t.constant(xc.clone())
                    .conv2d(&t.constant(wc.clone()), &v, stride, pad)
                    .unwrap()
                    .sum()
            },
            &b,
            1e-6,
        );
        assert!(
            ex < 1e-6 && ew < 1e-6 && eb < 1e-6,
            "stride {stride} pad {pad}: {ex} {ew} {eb}"
        );
    }
}

#[test]
fn relu_and_max_pool_examples() {
    let tape = Tape::new();
    let v = tape.constant(Tensor::from_vec(vec![-1.0, 2.0]));
    assert_eq!(v.relu().to_tensor().data(), &[0.0, 2.0]);

    let m = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let p = m.max_pool2d().unwrap();
    assert_eq!(p.shape(), vec![1, 1, 1]);
    assert_eq!(p.item(), 4.0);
}

#[test]
fn max_pool_ceil_mode_and_tie_break() {
    let tape = Tape::new();
    let x = tape.param(
        Tensor::new(
            vec![1, 3, 3],
            vec![5.0, 5.0, 1.0, 5.0, 5.0, 2.0, 0.0, 3.0, 3.0],
        )
        .unwrap(),
    );
    let p = x.max_pool2d().unwrap();
    assert_eq!(p.shape(), vec![1, 2, 2]);
    assert_eq!(p.to_tensor().data(), &[5.0, 2.0, 3.0, 3.0]);
    let g = tape.backward(p.sum()).unwrap();
    // ties resolve to the first cell in row-major order
    assert_eq!(
        g.get(x).unwrap(),
        &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0]
    );
}

#[test]
fn elementwise_ops_pass_gradient_check() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = nonzero_tensor(&mut rng, &[10]);
        let pos = random_tensor(&mut rng, &[10], 0.3, 2.0);
        let other = random_tensor(&mut rng, &[10], -1.0, 1.0);
        let proj = random_tensor(&mut rng, &[10], 0.5, 1.5);

        let checks: Vec<(&str, f64)> = vec![
            (
                "relu",
                grad_check(|t, v| projection(t, v.relu(), &proj), &x, 1e-6),
            ),
            (
                "exp",
                grad_check(|t, v| projection(t, v.exp(), &proj), &x, 1e-6),
            ),
            (
                "log",
                grad_check(|t, v| projection(t, v.log(), &proj), &pos, 1e-7),
            ),
            (
                "add",
                grad_check(
                    |t, v| projection(t, v.add(&t.constant(other.clone())).unwrap(), &proj),
                    &x,
                    1e-6,
                ),
            ),
            (
                "mul",
                grad_check(
                    |t, v| projection(t, v.mul(&t.constant(other.clone())).unwrap(), &proj),
                    &x,
                    1e-6,
                ),
            ),
            (
                "sub",
                grad_check(
                    |t, v| projection(t, t.constant(other.clone()).sub(&v).unwrap(), &proj),
                    &x,
                    1e-6,
                ),
            ),
            ("sum", grad_check(|_, v| v.mul(&v).unwrap().sum(), &x, 1e-6)),
            ("mean", grad_check(|_, v| v.exp().mean(), &x, 1e-6)),
            (
                "scale",
                grad_check(
                    |t, v| projection(t, v.scale(-2.5).add_scalar(1.0), &proj),
                    &x,
                    1e-6,
                ),
            ),
            (
                "smooth_l1",
                grad_check(|t, v| projection(t, v.smooth_l1(0.1), &proj), &x, 1e-6),
            ),
            (
                "l2_normalize",
                grad_check(
                    |t, v| projection(t, v.l2_normalize().unwrap(), &proj),
                    &x,
                    1e-6,
                ),
            ),
        ];
        for (name, err) in checks {
            assert!(err < 1e-4, "seed {seed} op {name}: {err}");
        }
    }
}

#[test]
fn grad_check_square_example() {
    let x = Tensor::from_vec(vec![1.0, 2.0]);
    let tape = Tape::new();
    let v = tape.param(x.clone());
    let g = tape.backward(v.mul(&v).unwrap().sum()).unwrap();
    assert_eq!(g.get(v).unwrap(), &[2.0, 4.0]);
    assert!(grad_check(|_, v| v.mul(&v).unwrap().sum(), &x, 1e-5) < 1e-8);
}

#[test]
fn matrix_ops_pass_gradient_check() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let a = random_tensor(&mut rng, &[2, 5], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[5, 2], -1.0, 1.0);
        let proj = random_tensor(&mut rng, &[4], 0.5, 1.5);
        let pool_in = random_tensor(&mut rng, &[1, 4, 5], -1.0, 1.0);
        let pool_proj = random_tensor(&mut rng, &[6], 0.5, 1.5);
        let xl = random_tensor(&mut rng, &[10], -1.0, 1.0);
        let wl = random_tensor(&mut rng, &[3, 10], -1.0, 1.0);
        let bl = random_tensor(&mut rng, &[3], -1.0, 1.0);
        let lproj = random_tensor(&mut rng, &[3], 0.5, 1.5);
        let lsm_proj = random_tensor(&mut rng, &[2, 5], 0.5, 1.5);

        let e_mm_a = grad_check(
            |t, v| projection(t, v.matmul(&t.constant(b.clone())).unwrap(), &proj),
            &a,
            1e-6,
        );
        let e_mm_b = grad_check(
            |t, v| projection(t, t.constant(a.clone()).matmul(&v).unwrap(), &proj),
            &b,
            1e-6,
        );
        let e_tr = grad_check(
            |t, v| {
                let tr = v.transpose().unwrap();
                tr.matmul(&t.constant(b.clone())).unwrap().sum()
            },
            &b.clone().reshape(vec![5, 2]).unwrap(),
            1e-6,
        );
        let e_pool = grad_check(
            |t, v| projection(t, v.max_pool2d().unwrap(), &pool_proj),
            &pool_in,
            1e-7,
        );
        let e_lin_x = grad_check(
            |t, v| {
                projection(
                    t,
                    v.linear(&t.constant(wl.clone()), &t.constant(bl.clone()))
                        .unwrap(),
                    &lproj,
                )
            },
            &xl,
            1e-6,
        );
        let e_lin_w = grad_check(
            |t, v| {
                projection(
                    t,
                    t.constant(xl.clone())
                        .linear(&v, &t.constant(bl.clone()))
                        .unwrap(),
                    &lproj,
                )
            },
            &wl,
            1e-6,
        );
        let e_lsm = grad_check(
            |t, v| projection(t, v.log_softmax_rows().unwrap(), &lsm_proj),
            &a,
            1e-6,
        );
        for (name, e) in [
            ("matmul_a", e_mm_a),
            ("matmul_b", e_mm_b),
            ("transpose", e_tr),
            ("max_pool2d", e_pool),
            ("linear_x", e_lin_x),
            ("linear_w", e_lin_w),
            ("log_softmax_rows", e_lsm),
        ] {
            assert!(e < 1e-4, "seed {seed} {name}: {e}");
        }
    }
}

#[test]
fn roi_align_constant_map() {
    let tape = Tape::new();
    let f = tape.constant(Tensor::full(vec![2, 5, 5], 0.37));
    for bbox in [
        [0.2, 0.3, 4.1, 3.9],
        [-2.0, -1.0, 7.5, 3.0],
        [1.0, 1.0, 1.5, 1.2],
    ] {
        let out = f.roi_align(bbox, 3, 3, 2).unwrap().to_tensor();
        assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }
}

#[test]
fn roi_align_center_of_2x2() {
    let tape = Tape::new();
    let f = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let out = f.roi_align([0.0, 0.0, 2.0, 2.0], 1, 1, 1).unwrap();
    assert!((out.item() - 2.5).abs() < 1e-15);
}

#[test]
fn roi_align_rejects_degenerate_boxes() {
    let tape = Tape::new();
    let f = tape.constant(Tensor::zeros(vec![1, 4, 4]));
    assert!(matches!(
        f.roi_align([1.0, 1.0, 1.0, 3.0], 2, 2, 2),
        Err(CmtError::DegenerateBox { .. })
    ));
    assert!(matches!(
        f.roi_align([1.0, 3.0, 2.0, 2.0], 2, 2, 2),
        Err(CmtError::DegenerateBox { .. })
    ));
}

#[test]
fn roi_align_matches_dense_oracle_and_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let map = random_tensor(&mut rng, &[2, 6, 6], -1.0, 1.0);
    let bbox = [1.3, 0.7, 4.9, 5.2];
    let tape = Tape::new();
    let out = tape
        .constant(map.clone())
        .roi_align(bbox, 3, 3, 2)
        .unwrap()
        .to_tensor();
    let expect = oracle::roi_align_dense(&map, bbox, 3, 3, 2);
    for (a, b) in out.data().iter().zip(&expect) {
        assert!((a - b).abs() <= 1e-9);
    }
    let proj = random_tensor(&mut rng, &[18], 0.5, 1.5);
    let err = grad_check(
        |t, v| projection(t, v.roi_align(bbox, 3, 3, 2).unwrap(), &proj),
        &map,
        1e-6,
    );
    assert!(err < 1e-6, "{err}");
}

#[test]
fn roi_align_partially_outside_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let map = random_tensor(&mut rng, &[3, 5, 7], -1.0, 1.0);
        let x1 = rng.gen_range(-3.0..6.0);
        let y1 = rng.gen_range(-3.0..4.0);
        let bbox = [
            x1,
            y1,
            x1 + rng.gen_range(0.3..5.0),
            y1 + rng.gen_range(0.3..5.0),
        ];
        let oh = rng.gen_range(1..4);
        let ow = rng.gen_range(1..4);
        let s = rng.gen_range(1..4);
        let tape = Tape::no_grad();
        let out = tape
            .constant(map.clone())
            .roi_align(bbox, oh, ow, s)
            .unwrap()
            .to_tensor();
        let expect = oracle::roi_align_dense(&map, bbox, oh, ow, s);
        for (a, b) in out.data().iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-9, "{bbox:?}: {a} vs {b}");
        }
    }
}

#[test]
fn no_grad_tape_records_nothing() {
    let tape = Tape::no_grad();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
    let y = x.exp().sum();
    assert!(!y.requires_grad());
    assert_eq!(tape.num_differentiable(), 0);
    assert!(matches!(tape.backward(y), Err(CmtError::NotRecording)));
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
    let c = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let y = x.mul(&c).unwrap().sum();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
    assert!(g.get(c).is_none());
}

#[test]
fn ops_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = random_tensor(&mut rng, &[3, 8, 8], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
    let run = || {
        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let y = xv
            .conv2d(
                &tape.constant(w.clone()),
                &tape.constant(Tensor::zeros(vec![4])),
                1,
                1,
            )
            .unwrap()
            .relu()
            .max_pool2d()
            .unwrap();
        let r = y.roi_align([0.5, 0.5, 3.2, 3.7], 2, 2, 2).unwrap().sum();
        let g = tape.backward(r).unwrap();
        (r.item().to_bits(), g.tensor(xv))
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}

#[test]
fn shape_errors_surface() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    assert!(matches!(a.matmul(&b), Err(CmtError::ShapeMismatch(_))));
    let c = tape.constant(Tensor::zeros(vec![3]));
    assert!(matches!(a.add(&c), Err(CmtError::ShapeMismatch(_))));
    assert!(Tensor::new(vec![2, 2], vec![1.0]).is_err());
}
