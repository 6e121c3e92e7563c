use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BurnInRecord, StepRecord, TrainConfig};
use crate::contrastive::{multi_scale_contrastive, ContrastiveInput};
use crate::detector::{
    detection_loss, forward_backbone, forward_head, DetectorParams, Forward, ParamVars,
};
use crate::error::{CmtError, Result};
use crate::geometry::BBox;
use crate::mean_teacher::{
    cutout_exclusion, ema_update, inject_label_noise, pseudo_labels_from, PseudoLabelSet,
};
use crate::numerics::{Tape, Tensor, Var};
use crate::synth_data::{
    apply_strong, apply_weak, target_ground_truth_reads, AugRecord, LabeledSplit, SceneObject,
    TargetSplit,
};

/// Independent random streams so that toggling one mechanism never shifts
/// the draws of another.
const STREAM_BURN_IN_SAMPLE: u64 = 1;
const STREAM_BURN_IN_AUG: u64 = 2;
const STREAM_SAMPLE: u64 = 3;
const STREAM_AUG: u64 = 4;
const STREAM_NOISE: u64 = 5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Student input for a labeled image: strong photometric jitter on top of a
/// weak geometric view, with labels mapped into it.
fn source_view<R: Rng>(
    img: &Tensor,
    objects: &[SceneObject],
    cfg: &TrainConfig,
    rng: &mut R,
) -> (Tensor, Vec<(BBox, usize)>) {
    let (weak, objs, _) = apply_weak(img, objects, &cfg.weak_aug, rng);
    let (strong, _) = apply_strong(&weak, &cfg.strong_aug, rng);
    (strong, objs.iter().map(|o| (o.bbox, o.class_id)).collect())
}

fn forward_on<'t>(
    tape: &'t Tape,
    vars: &ParamVars<'t>,
    img: &Tensor,
    cfg: &TrainConfig,
) -> Result<Forward<'t>> {
    let features = forward_backbone(tape.constant(img.clone()), vars, &cfg.detector)?;
    let prediction = forward_head(&features, vars, &cfg.detector)?;
    Ok(Forward {
        features,
        prediction,
    })
}

fn mean<'t>(terms: Vec<Var<'t>>) -> Result<Var<'t>> {
    let n = terms.len();
    let mut it = terms.into_iter();
    let first = it.next().ok_or(CmtError::EmptyBatch)?;
    let sum = it.try_fold(first, |acc, t| acc.add(&t))?;
    Ok(sum.scale(1.0 / n as f64))
}

/// Mean supervised detection loss over a labeled batch.
fn supervised_loss<'t>(
    tape: &'t Tape,
    vars: &ParamVars<'t>,
    batch: &[(Tensor, Vec<(BBox, usize)>)],
    cfg: &TrainConfig,
) -> Result<Var<'t>> {
    let mut terms = Vec::with_capacity(batch.len());
    for (img, labels) in batch {
        let fwd = forward_on(tape, vars, img, cfg)?;
        terms.push(detection_loss(&fwd.prediction, labels)?);
    }
    mean(terms)
}

fn sample_indices<R: Rng>(rng: &mut R, n: usize, k: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(CmtError::EmptyBatch);
    }
    Ok((0..k).map(|_| rng.gen_range(0..n)).collect())
}

/// Supervised-only training on source data from a fresh initialization.
/// Returns the student; the teacher starts as an exact copy.
pub fn burn_in(
    cfg: &TrainConfig,
    source: &LabeledSplit,
) -> Result<(DetectorParams, Vec<BurnInRecord>)> {
    cfg.validate()?;
    let mut student = DetectorParams::init(&cfg.detector, cfg.seed)?;
    let mut sample_rng = stream(cfg.seed, STREAM_BURN_IN_SAMPLE);
    let mut aug_rng = stream(cfg.seed, STREAM_BURN_IN_AUG);
    let mut records = Vec::with_capacity(cfg.burn_in_iters);
    for iter in 0..cfg.burn_in_iters {
        let idx = sample_indices(&mut sample_rng, source.len(), cfg.batch_size)?;
        let batch: Vec<_> = idx
            .iter()
            .map(|&i| source_view(&source.images[i], &source.annotations[i], cfg, &mut aug_rng))
            .collect();
        let tape = Tape::new();
        let vars = student.bind(&tape);
        let loss = supervised_loss(&tape, &vars, &batch, cfg)?.scale(cfg.lambda_sup_det);
        let value = loss.item();
        if !value.is_finite() {
            return Err(CmtError::Divergence { iter });
        }
        let grads = tape.backward(loss)?;
        student.sgd_step(&vars.gradients(&grads), cfg.lr);
        records.push(BurnInRecord {
            iter,
            l_sup_det: value,
        });
    }
    Ok((student, records))
}

/// Student, teacher and the random streams of one adaptation run.
pub struct TrainState {
    pub student: DetectorParams,
    pub teacher: DetectorParams,
    pub iter: usize,
    sample_rng: ChaCha8Rng,
    aug_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
}

impl TrainState {
    /// Starts adaptation from a burned-in student; the teacher is a copy.
    pub fn new(student: DetectorParams, seed: u64) -> Self {
        TrainState {
            teacher: student.clone(),
            student,
            iter: 0,
            sample_rng: stream(seed, STREAM_SAMPLE),
            aug_rng: stream(seed, STREAM_AUG),
            noise_rng: stream(seed, STREAM_NOISE),
        }
    }
}

/// Which loss paths a step took; used to check that toggles matter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepTrace {
    pub contrast_levels: Vec<(usize, usize)>,
    pub contrast_classes: Vec<Vec<usize>>,
    pub contrast_computed: bool,
}

struct TargetItem {
    weak: Tensor,
    strong: Tensor,
    view: AugRecord,
    student_view: AugRecord,
}

/// One adaptation iteration.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    source: &LabeledSplit,
    target: &TargetSplit,
) -> Result<(StepRecord, StepTrace)> {
    let gt_reads = target_ground_truth_reads();
    let iter = state.iter;

    // 1. Sample and augment both batches.
    let src_idx = sample_indices(&mut state.sample_rng, source.len(), cfg.batch_size)?;
    let tgt_idx = sample_indices(&mut state.sample_rng, target.len(), cfg.batch_size)?;
    let src_batch: Vec<_> = src_idx
        .iter()
        .map(|&i| {
            source_view(
                &source.images[i],
                &source.annotations[i],
                cfg,
                &mut state.aug_rng,
            )
        })
        .collect();
    let tgt_batch: Vec<TargetItem> = tgt_idx
        .iter()
        .map(|&i| {
            let (weak, _, view) =
                apply_weak(&target.images[i], &[], &cfg.weak_aug, &mut state.aug_rng);
            let (strong, strong_rec) = apply_strong(&weak, &cfg.strong_aug, &mut state.aug_rng);
            let student_view = view.clone().with_strong(&strong_rec);
            TargetItem {
                weak,
                strong,
                view,
                student_view,
            }
        })
        .collect();

    // 2. EMA before pseudo-labeling.
    ema_update(&mut state.teacher, &state.student, cfg.alpha)?;

    // 3. Teacher inference without a tape, then label post-processing.
    let teacher_tape = Tape::no_grad();
    let teacher_vars = state.teacher.bind(&teacher_tape);
    let mut teacher_fwd = Vec::with_capacity(tgt_batch.len());
    let mut det_labels = Vec::with_capacity(tgt_batch.len());
    let mut contrast_labels = Vec::with_capacity(tgt_batch.len());
    let (mut num_pseudo, mut num_excluded) = (0, 0);
    for item in &tgt_batch {
        let fwd = forward_on(&teacher_tape, &teacher_vars, &item.weak, cfg)?;
        let mut labels = pseudo_labels_from(
            &fwd.prediction.values(),
            item.view.clone(),
            cfg.gamma,
            cfg.pseudo_nms_iou,
        );
        if cfg.noise_fraction > 0.0 {
            labels = inject_label_noise(
                &labels,
                cfg.noise_fraction,
                cfg.detector.num_classes,
                &mut state.noise_rng,
            );
        }
        let kept = if cfg.cutout_exclusion {
            let (kept, excluded) =
                cutout_exclusion(&item.weak, &item.strong, &labels, &item.student_view);
            num_excluded += excluded.len();
            kept
        } else {
            labels.clone()
        };
        num_pseudo += labels.len();
        teacher_fwd.push(fwd);
        det_labels.push(labels);
        contrast_labels.push(kept);
    }
    debug_assert_eq!(teacher_tape.num_differentiable(), 0);

    // 4. Student forward on the strong views; its maps feed the contrast.
    let tape = Tape::new();
    let vars = state.student.bind(&tape);
    let student_fwd = tgt_batch
        .iter()
        .map(|item| forward_on(&tape, &vars, &item.strong, cfg))
        .collect::<Result<Vec<_>>>()?;

    // 5. Object-level contrast.
    let mut trace = StepTrace::default();
    let mut l_contrast = None;
    if cfg.contrastive_enabled && contrast_labels.iter().any(|l| !l.is_empty()) {
        let inputs: Vec<ContrastiveInput> = (0..tgt_batch.len())
            .map(|i| ContrastiveInput {
                student: &student_fwd[i].features,
                teacher: &teacher_fwd[i].features,
                labels: &contrast_labels[i],
                student_view: &tgt_batch[i].student_view,
            })
            .collect();
        match multi_scale_contrastive(&inputs, &cfg.contrastive()) {
            Ok(term) => {
                trace.contrast_levels = term.objects_per_level;
                trace.contrast_classes = term.classes_used;
                trace.contrast_computed = true;
                l_contrast = Some(term.loss);
            }
            Err(CmtError::EmptyBatch) => {}
            Err(e) => return Err(e),
        }
    }

    // 6. Unsupervised detection loss against pseudo-labels in the student view.
    let unsup_terms = student_fwd
        .iter()
        .zip(&det_labels)
        .zip(&tgt_batch)
        .map(
            |((fwd, labels), item): ((&Forward, &PseudoLabelSet), &TargetItem)| {
                detection_loss(&fwd.prediction, &labels.mapped_to(&item.student_view))
            },
        )
        .collect::<Result<Vec<_>>>()?;
    let l_unsup = mean(unsup_terms)?;

    // 7. Supervised loss on the labeled batch.
    let l_sup = supervised_loss(&tape, &vars, &src_batch, cfg)?;

    // 8. Weighted sum and one SGD step on the student.
    let w_sup = l_sup.scale(cfg.lambda_sup_det);
    let w_unsup = l_unsup.scale(cfg.lambda_unsup_det);
    let mut total = w_sup.add(&w_unsup)?;
    let mut contrast_value = 0.0;
    if let Some(lc) = l_contrast {
        let w_contrast = lc.scale(cfg.lambda_contrast);
        contrast_value = w_contrast.item();
        total = total.add(&w_contrast)?;
    }
    let l_total = total.item();
    if !l_total.is_finite() {
        return Err(CmtError::Divergence { iter });
    }
    let grads = tape.backward(total)?;
    state.student.sgd_step(&vars.gradients(&grads), cfg.lr);
    state.iter += 1;

    assert_eq!(
        target_ground_truth_reads(),
        gt_reads,
        "training step read target-domain annotations"
    );
    let record = StepRecord {
        iter,
        l_contrast: contrast_value,
        l_unsup_det: w_unsup.item(),
        l_sup_det: w_sup.item(),
        l_total,
        num_pseudo_labels: num_pseudo,
        num_excluded,
    };
    Ok((record, trace))
}
