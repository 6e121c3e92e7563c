use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{grad_check, Tape};
use crate::oracle::{contrastive_double_loop, moco_cross_entropy, roi_align_dense};

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn fixture(
    seed: u64,
    n: usize,
    d: usize,
    num_classes: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zs = (0..n).map(|_| unit(&mut rng, d)).collect();
    let zt = (0..n).map(|_| unit(&mut rng, d)).collect();
    let classes = (0..n).map(|_| rng.gen_range(0..num_classes)).collect();
    (zs, zt, classes)
}

fn loss_value(zs: &[Vec<f64>], zt: &[Vec<f64>], classes: &[usize], tau: f64, lambda: f64) -> f64 {
    let tape = Tape::new();
    let s: Vec<Var> = zs
        .iter()
        .map(|z| tape.param(Tensor::from_vec(z.clone())))
        .collect();
    let t: Vec<Tensor> = zt.iter().map(|z| Tensor::from_vec(z.clone())).collect();
    contrastive_loss(&s, &t, classes, tau, lambda)
        .unwrap()
        .item()
}

fn moco_value(zq: &[Vec<f64>], zk: &[Vec<f64>], tau: f64) -> f64 {
    let tape = Tape::new();
    let q: Vec<Var> = zq
        .iter()
        .map(|z| tape.param(Tensor::from_vec(z.clone())))
        .collect();
    let k: Vec<Tensor> = zk.iter().map(|z| Tensor::from_vec(z.clone())).collect();
    moco_loss(&q, &k, tau).unwrap().item()
}

#[test]
fn positive_set_examples() {
    assert_eq!(
        positive_sets(&[0, 1, 0]),
        vec![vec![0, 2], vec![1], vec![0, 2]]
    );
    assert!(positive_sets(&[2; 4]).iter().all(|p| p.len() == 4));
    assert_eq!(positive_sets(&[0, 1, 2]), vec![vec![0], vec![1], vec![2]]);
}

#[test]
fn single_object_loss_is_zero() {
    let (zs, zt, _) = fixture(0, 1, 5, 1);
    assert_eq!(loss_value(&zs, &zt, &[0], 0.07, 0.05), 0.0);
}

#[test]
fn two_orthogonal_pairs() {
    let zs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let zt = zs.clone();
    let tau: f64 = 0.07;
    let term = -((1.0 / tau).exp() / ((1.0 / tau).exp() + 1.0)).ln();
    let want = 0.05 * term;
    let got = loss_value(&zs, &zt, &[0, 1], tau, 0.05);
    assert!((got - want).abs() < 1e-15);
    assert!((got - contrastive_double_loop(&zs, &zt, &[0, 1], tau, 0.05)).abs() < 1e-15);
}

#[test]
fn matches_double_loop_oracle() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.gen_range(1..=8);
        let d = rng.gen_range(2..12);
        let (zs, zt, classes) = fixture(seed, n, d, 3);
        let got = loss_value(&zs, &zt, &classes, DEFAULT_TAU, DEFAULT_LAMBDA);
        let want = contrastive_double_loop(&zs, &zt, &classes, DEFAULT_TAU, DEFAULT_LAMBDA);
        assert!((got - want).abs() < 1e-10, "seed {seed}: {got} vs {want}");
        assert!(got >= 0.0);
    }
}

#[test]
fn gradient_wrt_student_features() {
    let (zs, zt, classes) = fixture(4, 4, 6, 2);
    let t: Vec<Tensor> = zt.iter().map(|z| Tensor::from_vec(z.clone())).collect();
    for i in 0..4 {
        let err = grad_check(
            |tape, x| {
                let s: Vec<Var> = (0..4)
                    .map(|j| {
                        if j == i {
                            x
                        } else {
                            tape.constant(Tensor::from_vec(zs[j].clone()))
                        }
                    })
                    .collect();
                contrastive_loss(&s, &t, &classes, DEFAULT_TAU, DEFAULT_LAMBDA).unwrap()
            },
            &Tensor::from_vec(zs[i].clone()),
            1e-6,
        );
        assert!(err < 1e-4, "object {i}: {err}");
    }
}

#[test]
fn low_temperature_is_finite() {
    let (zs, zt, classes) = fixture(5, 6, 4, 2);
    let v = loss_value(&zs, &zt, &classes, 0.01, 1.0);
    assert!(v.is_finite());
    let (zs, _, _) = fixture(6, 3, 4, 1);
    assert!(loss_value(&zs, &zs, &[0, 1, 2], 0.001, 1.0).is_finite());
}

#[test]
fn empty_and_mismatched_inputs() {
    let tape = Tape::new();
    assert!(matches!(
        contrastive_loss(&[], &[], &[], 0.07, 1.0),
        Err(CmtError::EmptyBatch)
    ));
    let z = tape.param(Tensor::from_vec(vec![1.0, 0.0]));
    assert!(matches!(
        moco_loss(&[z], &[Tensor::from_vec(vec![1.0, 0.0])], 0.07),
        Err(CmtError::EmptyBatch)
    ));
    assert!(contrastive_loss(&[z], &[], &[0], 0.07, 1.0).is_err());
}

#[test]
fn moco_orthogonal_example() {
    let n = 4;
    let z: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let e = 1f64.exp();
    let want = -(e / (e + (n - 1) as f64)).ln();
    assert!((moco_value(&z, &z, 1.0) - want).abs() < 1e-15);
}

#[test]
fn moco_matches_cross_entropy_oracle() {
    for seed in 0..100 {
        let (zq, zk, _) = fixture(200 + seed, 5, 7, 1);
        let got = moco_value(&zq, &zk, DEFAULT_TAU);
        assert!((got - moco_cross_entropy(&zq, &zk, DEFAULT_TAU)).abs() < 1e-10);
    }
}

#[test]
fn distinct_classes_reduce_to_moco() {
    for seed in 0..50 {
        let (zs, zt, _) = fixture(300 + seed, 6, 5, 1);
        let classes: Vec<usize> = (0..6).collect();
        let a = loss_value(&zs, &zt, &classes, DEFAULT_TAU, 1.0);
        let b = moco_value(&zs, &zt, DEFAULT_TAU);
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn raising_a_positive_similarity_lowers_the_loss() {
    // Teacher features are basis vectors e_0..e_3 in R^5; the student feature
    // of object 0 is a·e_0 + 0.3·e_1 + 0.2·e_2 + c·e_4, so raising a (and
    // lowering c to stay on the sphere) changes only z_0ˢ·z_0ᵀ.
    let basis = |k: usize| {
        (0..5)
            .map(|j| if j == k { 1.0 } else { 0.0 })
            .collect::<Vec<f64>>()
    };
    let zt: Vec<Vec<f64>> = (0..4).map(basis).collect();
    let classes = [0, 1, 2, 1];
    let student0 = |a: f64| {
        let c = (1.0 - a * a - 0.09 - 0.04).sqrt();
        vec![a, 0.3, 0.2, 0.0, c]
    };
    let rest: Vec<Vec<f64>> = vec![
        unit_of(&[0.1, 0.9, 0.2, 0.3, 0.1]),
        unit_of(&[0.2, 0.1, 0.8, 0.0, 0.4]),
        unit_of(&[0.3, 0.2, 0.1, 0.9, 0.0]),
    ];
    let loss_at = |a: f64| {
        let mut zs = vec![student0(a)];
        zs.extend(rest.iter().cloned());
        loss_value(&zs, &zt, &classes, DEFAULT_TAU, DEFAULT_LAMBDA)
    };
    let mut prev = loss_at(0.1);
    for step in 1..8 {
        let cur = loss_at(0.1 + 0.1 * step as f64);
        assert!(cur < prev);
        prev = cur;
    }
}

fn unit_of(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

proptest! {
    #[test]
    fn permutation_equivariance(seed in 0u64..500, n in 1usize..7) {
        let (zs, zt, classes) = fixture(seed, n, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let pzs: Vec<Vec<f64>> = perm.iter().map(|&i| zs[i].clone()).collect();
        let pzt: Vec<Vec<f64>> = perm.iter().map(|&i| zt[i].clone()).collect();
        let pc: Vec<usize> = perm.iter().map(|&i| classes[i]).collect();
        let a = loss_value(&zs, &zt, &classes, DEFAULT_TAU, DEFAULT_LAMBDA);
        let b = loss_value(&pzs, &pzt, &pc, DEFAULT_TAU, DEFAULT_LAMBDA);
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!(a >= 0.0);
    }
}

fn random_map(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        [c, h, w],
        (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn constant_map_features_coincide() {
    let tape = Tape::new();
    let map = tape.constant(Tensor::full([2, 8, 8], 0.7));
    let view = AugRecord::identity(32, 32);
    let boxes = [
        BBox::new(1.0, 1.0, 9.0, 9.0),
        BBox::new(10.0, 3.0, 30.0, 20.0),
    ];
    let f = extract_object_features(map, 4, 1, &boxes, &view, &view, 3, FeatureSource::Teacher);
    let a = f[0].as_ref().unwrap().vec.to_tensor();
    let b = f[1].as_ref().unwrap().vec.to_tensor();
    assert!((a.dot(&b) - 1.0).abs() < 1e-12);
    assert!((a.norm() - 1.0).abs() < 1e-12);
}

#[test]
fn stride_one_identity_matches_definition() {
    let tape = Tape::new();
    let m = random_map(1, 3, 10, 10);
    let map = tape.param(m.clone());
    let view = AugRecord::identity(10, 10);
    let b = BBox::new(1.5, 2.0, 7.0, 9.0);
    let f = extract_object_features(map, 1, 0, &[b], &view, &view, 3, FeatureSource::Student);
    let got = f[0].as_ref().unwrap().vec.to_tensor();
    let direct = map
        .roi_align(b.to_array(), 3, 3, DEFAULT_SAMPLES_PER_BIN)
        .unwrap()
        .flatten()
        .l2_normalize()
        .unwrap();
    assert_eq!(got, direct.to_tensor());
}

#[test]
fn stride_four_window_matches_oracle() {
    let tape = Tape::new();
    let m = random_map(2, 2, 8, 8);
    let map = tape.constant(m.clone());
    let view = AugRecord::identity(32, 32);
    let f = extract_object_features(
        map,
        4,
        1,
        &[BBox::new(8.0, 8.0, 24.0, 24.0)],
        &view,
        &view,
        3,
        FeatureSource::Teacher,
    );
    let got = f[0].as_ref().unwrap().vec.to_tensor();
    let dense = roi_align_dense(&m, [2.0, 2.0, 6.0, 6.0], 3, 3, DEFAULT_SAMPLES_PER_BIN);
    let n = dense.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (g, d) in got.data().iter().zip(&dense) {
        assert!((g - d / n).abs() < 1e-9);
    }
}

#[test]
fn sub_cell_and_outside_boxes_error() {
    let tape = Tape::new();
    let map = tape.constant(random_map(3, 2, 4, 4));
    let view = AugRecord::identity(32, 32);
    let mut shifted = view.clone();
    shifted.crop_offset = (16.0, 0.0);
    shifted.crop_scale = 0.5;
    let boxes = [
        BBox::new(0.0, 0.0, 6.0, 6.0),
        BBox::new(0.0, 0.0, 12.0, 12.0),
    ];
    let f = extract_object_features(
        map,
        8,
        2,
        &boxes,
        &view,
        &shifted,
        3,
        FeatureSource::Student,
    );
    assert!(matches!(f[0], Err(CmtError::BoxOutsideView)));
    let f = extract_object_features(map, 8, 2, &boxes, &view, &view, 3, FeatureSource::Student);
    assert!(matches!(f[0], Err(CmtError::DegenerateBox { .. })));
    assert!(f[1].is_ok());
}

struct Pyramid {
    maps: Vec<Tensor>,
    strides: Vec<usize>,
}

fn pyramid(seed: u64) -> Pyramid {
    Pyramid {
        maps: vec![random_map(seed, 3, 16, 16), random_map(seed + 1, 4, 8, 8)],
        strides: vec![2, 4],
    }
}

fn bind<'t>(tape: &'t Tape, p: &Pyramid) -> BackboneFeatures<'t> {
    BackboneFeatures {
        maps: p.maps.iter().map(|m| tape.param(m.clone())).collect(),
        strides: p.strides.clone(),
    }
}

fn label_set(view: AugRecord) -> PseudoLabelSet {
    PseudoLabelSet {
        boxes: vec![
            BBox::new(2.0, 2.0, 14.0, 12.0),
            BBox::new(10.0, 8.0, 30.0, 28.0),
            BBox::new(16.0, 1.0, 19.0, 3.0),
        ],
        classes: vec![0, 1, 0],
        scores: vec![0.9, 0.8, 0.7],
        view,
    }
}

#[test]
fn multi_scale_sums_per_level_losses() {
    let (ps, pt) = (pyramid(10), pyramid(20));
    let st = Tape::new();
    let tt = Tape::no_grad();
    let (fs, ft) = (bind(&st, &ps), bind(&tt, &pt));
    let view = AugRecord::identity(32, 32);
    let mut sview = AugRecord::geometric(32, 32, true, (1.0, 2.0), 0.9);
    sview.photometric.brightness = 1.1;
    let labels = label_set(view.clone());
    let input = [ContrastiveInput {
        student: &fs,
        teacher: &ft,
        labels: &labels,
        student_view: &sview,
    }];
    let mut cfg = ContrastiveConfig {
        levels: vec![0, 1],
        ..ContrastiveConfig::default()
    };
    let total = multi_scale_contrastive(&input, &cfg).unwrap();

    let mut want = 0.0;
    for level in 0..2 {
        let (mut zs, mut zt, mut cls) = (Vec::new(), Vec::new(), Vec::new());
        for (i, b) in labels.boxes.iter().enumerate() {
            let s = ps.strides[level] as f64;
            let sb = transform_box(b, &view, &sview).unwrap().scaled(1.0 / s);
            let tb = b.scaled(1.0 / s);
            if sb.width() < 1.0 || sb.height() < 1.0 || tb.width() < 1.0 || tb.height() < 1.0 {
                continue;
            }
            let pool = |m: &Tensor, bb: BBox| {
                let d = roi_align_dense(m, bb.to_array(), 3, 3, DEFAULT_SAMPLES_PER_BIN);
                let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                d.into_iter().map(|v| v / n).collect::<Vec<f64>>()
            };
            zs.push(pool(&ps.maps[level], sb));
            zt.push(pool(&pt.maps[level], tb));
            cls.push(labels.classes[i]);
        }
        want += contrastive_double_loop(&zs, &zt, &cls, DEFAULT_TAU, 1.0);
    }
    assert!((total.loss.item() - want).abs() < 1e-10);
    assert_eq!(total.objects_per_level, vec![(0, 2), (1, 2)]);

    cfg.levels = vec![1];
    let single = multi_scale_contrastive(&input, &cfg).unwrap();
    cfg.multi_scale = false;
    cfg.levels = vec![1, 0];
    let finest = multi_scale_contrastive(&input, &cfg).unwrap();
    assert_eq!(finest.objects_per_level, vec![(0, 2)]);
    assert!(single.loss.item() > 0.0);

    cfg = ContrastiveConfig {
        levels: vec![0],
        class_based: false,
        ..ContrastiveConfig::default()
    };
    let inst = multi_scale_contrastive(&input, &cfg).unwrap();
    assert_eq!(inst.classes_used, vec![vec![0, 1]]);

    let grads = st.backward(total.loss).unwrap();
    assert!(grads.get(fs.maps[0]).is_some());
    assert!(tt.num_differentiable() == 0);
}

#[test]
fn no_boxes_is_empty_batch() {
    let p = pyramid(1);
    let tape = Tape::new();
    let f = bind(&tape, &p);
    let view = AugRecord::identity(32, 32);
    let labels = PseudoLabelSet::empty(view.clone());
    let input = [ContrastiveInput {
        student: &f,
        teacher: &f,
        labels: &labels,
        student_view: &view,
    }];
    let cfg = ContrastiveConfig {
        levels: vec![0, 1],
        ..ContrastiveConfig::default()
    };
    assert!(matches!(
        multi_scale_contrastive(&input, &cfg),
        Err(CmtError::EmptyBatch)
    ));
}
