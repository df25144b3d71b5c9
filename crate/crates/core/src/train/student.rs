use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batches::{epoch_plan, for_each_prefetched, prefetch_threads};
use super::sgd::{LrSchedule, Sgd};
use super::{total_loss, LossTerms};
use crate::bbox::{Annotation, BoundingBox};
use crate::diffmath::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::eval::{coco_metrics, CocoMetrics, Detection, EvalConfig};
use crate::kd_cls::{kd_cls_loss, HeadKind};
use crate::kd_loc::{crop_resize, kd_loc_loss, DistillConfig};
use crate::models::{
    assign_anchors, batch_positives, decode_boxes, detection_loss, DetectionLossConfig,
    PositiveRef, PostProcess, Student, StudentArch, Teacher,
};
use crate::synthdata::DetectionDataset;

pub const ASSIGN_POS_IOU: f64 = 0.5;
pub const ASSIGN_NEG_IOU: f64 = 0.4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub head: HeadKind,
    pub flip: bool,
    pub terms: LossTerms,
    pub distill: DistillConfig,
    pub detection: DetectionLossConfig,
    /// Checkpoint the teacher was loaded from; informational here.
    pub teacher: Option<String>,
}

impl Default for StudentRunConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            seed: 0,
            lr: 0.02,
            momentum: 0.9,
            head: HeadKind::Categorical,
            flip: true,
            terms: LossTerms::default(),
            distill: DistillConfig::default(),
            detection: DetectionLossConfig::default(),
            teacher: None,
        }
    }
}

impl StudentRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config(format!(
                "bad lr {} or momentum {}",
                self.lr, self.momentum
            )));
        }
        self.distill.validate()
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentEpoch {
    pub epoch: usize,
    pub loss_det: f64,
    pub loss_kd_cls: f64,
    pub loss_kd_loc: f64,
    #[serde(rename = "val_mAP")]
    pub val_map: f64,
    #[serde(rename = "val_AP50")]
    pub val_ap50: f64,
    #[serde(rename = "val_AP75")]
    pub val_ap75: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct StudentRun {
    /// Parameters after the last epoch.
    pub student: Student,
    pub history: Vec<StudentEpoch>,
}

/// Detections for every image of `data`, in image order.
pub fn detect_all(
    student: &Student,
    data: &DetectionDataset,
    post: &PostProcess,
) -> Result<Vec<Vec<Detection>>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(64) {
        out.extend(student.detect(&data.batch_images(chunk, &[]), post)?);
    }
    Ok(out)
}

/// COCO-style metrics of `student` on `data`.
pub fn evaluate_detector(student: &Student, data: &DetectionDataset) -> Result<CocoMetrics> {
    let dets = detect_all(student, data, &PostProcess::default())?;
    Ok(coco_metrics(
        &dets,
        &data.annotations(),
        data.classes,
        &EvalConfig::default(),
    ))
}

/// Teacher logits `[K, C]` of the ground-truth crop behind every positive.
/// Each object is cropped and classified once even when several anchors
/// match it.
fn teacher_gt_logits(
    teacher: &Teacher,
    images: &Tensor,
    targets: &[Annotation],
    pos: &[PositiveRef],
) -> Result<Tensor> {
    let [_, c, h, w] = images.shape()[..] else {
        unreachable!("batch images are 4-d")
    };
    let s = teacher.arch.input_size;
    let mut slot = BTreeMap::new();
    let mut crops = Vec::new();
    for p in pos {
        slot.entry((p.image, p.gt)).or_insert_with(|| {
            let image = &images.data()[p.image * c * h * w..(p.image + 1) * c * h * w];
            crops.push(crop_resize(
                image,
                c,
                h,
                w,
                &targets[p.image].boxes[p.gt],
                s,
            ));
            crops.len() - 1
        });
    }
    let n = crops.len();
    let data = crops.into_iter().collect::<Result<Vec<_>>>()?.concat();
    let tape = Tape::new();
    let params = teacher.params.bind(&tape, false);
    let logits = teacher
        .forward(&params, tape.constant(Tensor::new(&[n, c, s, s], data)?))?
        .logits
        .value();
    let classes = teacher.arch.classes;
    let rows: Vec<f64> = pos
        .iter()
        .flat_map(|p| {
            let r = slot[&(p.image, p.gt)];
            logits.data()[r * classes..(r + 1) * classes]
                .iter()
                .copied()
        })
        .collect();
    Tensor::new(&[pos.len(), classes], rows)
}

struct BatchLoss {
    det: f64,
    kd_cls: f64,
    kd_loc: f64,
}

/// Builds the loss of one batch, backpropagates it and applies the update.
#[allow(clippy::too_many_arguments)]
fn train_step(
    student: &mut Student,
    sgd: &mut Sgd,
    teacher: Option<&Teacher>,
    images: Tensor,
    targets: &[Annotation],
    cfg: &StudentRunConfig,
    loc: Option<&DistillConfig>,
    lr: f64,
) -> Result<BatchLoss> {
    let tape = Tape::new();
    let p = student.params.bind(&tape, true);
    let out = student.forward(&p, tape.constant(images.clone()))?;
    let anchors = student.anchors();
    let assignments = targets
        .iter()
        .map(|t| assign_anchors(anchors, &t.boxes, ASSIGN_POS_IOU, ASSIGN_NEG_IOU))
        .collect::<Result<Vec<_>>>()?;
    let det = detection_loss(
        &out,
        anchors,
        targets,
        &assignments,
        cfg.head,
        &cfg.detection,
    )?
    .total;
    let a = anchors.len();
    let pos = batch_positives(&assignments, a);
    let flat: Vec<usize> = pos.iter().map(|p| p.flat).collect();

    let kd_cls = match (cfg.terms.kd_cls, teacher) {
        (true, Some(t)) if !pos.is_empty() => {
            let d = student.arch.class_columns();
            let zs = out
                .logits
                .reshape(&[targets.len() * a, d])?
                .index_select(&flat)?;
            let zt = tape.constant(teacher_gt_logits(t, &images, targets, &pos)?);
            Some(kd_cls_loss(zs, zt, cfg.head, cfg.distill.temperature)?)
        }
        (true, _) => Some(tape.scalar(0.0)),
        (false, _) => None,
    };

    let kd_loc = match loc {
        Some(lc) if !pos.is_empty() => {
            let offsets = out
                .offsets
                .reshape(&[targets.len() * a, 4])?
                .index_select(&flat)?;
            let pos_anchors: Vec<BoundingBox> = pos.iter().map(|p| anchors[p.anchor]).collect();
            let pred = decode_boxes(&pos_anchors, offsets)?;
            let gt: Vec<BoundingBox> = pos.iter().map(|p| targets[p.image].boxes[p.gt]).collect();
            let image_index: Vec<usize> = pos.iter().map(|p| p.image).collect();
            let tparams: Vec<Var> = teacher
                .map(|t| t.params.bind(&tape, false))
                .unwrap_or_default();
            let tref = teacher.map(|t| (t, tparams.as_slice()));
            let tref = if lc.feature_layers().is_empty() {
                None
            } else {
                tref
            };
            Some(kd_loc_loss(
                pred,
                &gt,
                tape.constant(images),
                &image_index,
                tref,
                lc,
            )?)
        }
        Some(_) => Some(tape.scalar(0.0)),
        None => None,
    };

    let total = total_loss(det, kd_cls, kd_loc, &cfg.distill)?;
    let record = BatchLoss {
        det: det.item()?,
        kd_cls: kd_cls.map_or(Ok(0.0), |v| v.item())?,
        kd_loc: kd_loc.map_or(Ok(0.0), |v| v.item())?,
    };
    let grads = tape.backward(total)?;
    sgd.step_from(&mut student.params, &p, grads, lr)?;
    Ok(record)
}

/// Trains a detector on `train`, evaluating on `val` after every epoch.
/// The teacher is only read; it is required when a distillation term other
/// than the pixel-level localization term is enabled.
pub fn train_student(
    train: &DetectionDataset,
    val: &DetectionDataset,
    teacher: Option<&Teacher>,
    cfg: &StudentRunConfig,
    mut on_epoch: impl FnMut(&StudentEpoch),
) -> Result<StudentRun> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(
            "student training needs non-empty train and val sets".into(),
        ));
    }
    if cfg.terms.needs_teacher(&cfg.distill) && teacher.is_none() {
        return Err(Error::Config(
            "the enabled distillation terms need a teacher; only the pixel localization term runs without one".into(),
        ));
    }
    if let Some(t) = teacher {
        if t.arch.classes != train.classes {
            return Err(Error::Config(format!(
                "teacher has {} classes, dataset {}",
                t.arch.classes, train.classes
            )));
        }
    }
    let loc = cfg
        .terms
        .loc_layers(&cfg.distill)
        .map(|layers| DistillConfig {
            layers,
            ..cfg.distill.clone()
        });
    if let Some(l) = &loc {
        l.validate()?;
    }
    let arch = StudentArch::new(train.image_size, train.classes, cfg.head);
    let mut student = Student::new(arch, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let schedule = LrSchedule::step_decay(cfg.lr, cfg.epochs);
    let mut sgd = Sgd::new(&student.params, cfg.momentum);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch);
        let plan = epoch_plan(cfg.seed, epoch, train.len(), cfg.flip);
        let mut sums = [0.0; 3];
        let mut batches = 0usize;
        for_each_prefetched(
            plan.batches(cfg.batch_size),
            prefetch_threads(),
            |(idx, flips)| {
                let targets: Vec<Annotation> = idx
                    .iter()
                    .zip(&flips)
                    .map(|(&i, &f)| train.annotation(i, f))
                    .collect();
                (train.batch_images(&idx, &flips), targets)
            },
            |b, (images, targets)| -> Result<()> {
                let l = train_step(
                    &mut student,
                    &mut sgd,
                    teacher,
                    images,
                    &targets,
                    cfg,
                    loc.as_ref(),
                    lr,
                )
                .map_err(|e| match e {
                    Error::Numerical(m) => {
                        Error::Numerical(format!("epoch {}, batch {b}: {m}", epoch + 1))
                    }
                    other => other,
                })?;
                sums[0] += l.det;
                sums[1] += l.kd_cls;
                sums[2] += l.kd_loc;
                batches += 1;
                Ok(())
            },
        )?;
        let m = evaluate_detector(&student, val)?;
        let nb = batches.max(1) as f64;
        let record = StudentEpoch {
            epoch: epoch + 1,
            loss_det: sums[0] / nb,
            loss_kd_cls: sums[1] / nb,
            loss_kd_loc: sums[2] / nb,
            val_map: m.map,
            val_ap50: m.ap50,
            val_ap75: m.ap75,
            lr,
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(StudentRun { student, history })
}
