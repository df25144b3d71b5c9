use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batches::{epoch_plan, for_each_prefetched, prefetch_threads};
use super::sgd::{LrSchedule, Sgd};
use crate::diffmath::{Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::models::{Teacher, TeacherArch};
use crate::synthdata::CropDataset;

/// Training objective of the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherLossKind {
    Categorical,
    /// One-vs-all sigmoid cross-entropy.
    Binary,
    /// Sum of the two.
    Joint,
}

impl std::str::FromStr for TeacherLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "categorical" => Ok(Self::Categorical),
            "binary" => Ok(Self::Binary),
            "joint" => Ok(Self::Joint),
            other => Err(Error::Config(format!("unknown teacher loss {other:?}"))),
        }
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(shape_err!("label {bad} out of range for {classes} classes"));
    }
    Ok(Tensor::from_fn(&[labels.len(), classes], |i| {
        (labels[i / classes] == i % classes) as u8 as f64
    }))
}

/// Mean over the batch of the chosen classification loss on `[N, C]` logits.
pub fn teacher_loss<'t>(
    logits: Var<'t>,
    labels: &[usize],
    kind: TeacherLossKind,
) -> Result<Var<'t>> {
    let shape = logits.shape();
    let [n, c] = shape[..] else {
        return Err(shape_err!("teacher logits must be [N, C], got {shape:?}"));
    };
    if n != labels.len() || n == 0 {
        return Err(shape_err!("{n} logit rows for {} labels", labels.len()));
    }
    let tape = logits.tape();
    let y = one_hot(labels, c)?;
    let ce = || -> Result<Var<'t>> {
        logits
            .log_softmax_t(1.0)?
            .mul(tape.constant(y.clone()))?
            .sum()?
            .scale(-1.0 / n as f64)
    };
    let bce = || -> Result<Var<'t>> {
        let not_y = y.clone().map(|v| 1.0 - v);
        let pos = logits.log_sigmoid_t(1.0)?.mul(tape.constant(y.clone()))?;
        let neg = logits
            .neg()?
            .log_sigmoid_t(1.0)?
            .mul(tape.constant(not_y))?;
        pos.add(neg)?.sum()?.scale(-1.0 / n as f64)
    };
    match kind {
        TeacherLossKind::Categorical => ce(),
        TeacherLossKind::Binary => bce(),
        TeacherLossKind::Joint => ce()?.add(bce()?),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub loss: TeacherLossKind,
    pub flip: bool,
}

impl Default for TeacherRunConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            seed: 0,
            lr: 0.05,
            momentum: 0.9,
            loss: TeacherLossKind::Categorical,
            flip: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TeacherRun {
    /// Parameters of the epoch with the best validation accuracy.
    pub teacher: Teacher,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub history: Vec<TeacherEpoch>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy on a crop set.
pub fn evaluate_teacher(teacher: &Teacher, data: &CropDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(128) {
        let (x, labels) = data.batch(chunk, &[]);
        let tape = Tape::new();
        let p = teacher.params.bind(&tape, false);
        let logits = teacher.forward(&p, tape.constant(x))?.logits.value();
        let c = teacher.arch.classes;
        correct += logits
            .data()
            .chunks(c)
            .zip(&labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains a classifier on `train` and keeps the best epoch on `val`.
/// `on_epoch` sees every epoch's record as it completes.
pub fn train_teacher(
    train: &CropDataset,
    val: &CropDataset,
    cfg: &TeacherRunConfig,
    mut on_epoch: impl FnMut(&TeacherEpoch),
) -> Result<TeacherRun> {
    if train.is_empty() || cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config(
            "teacher training needs data, a batch size and epochs".into(),
        ));
    }
    let arch = TeacherArch::new(train.crop_size, train.classes);
    let mut teacher = Teacher::new(arch, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let schedule = LrSchedule::step_decay(cfg.lr, cfg.epochs);
    let mut sgd = Sgd::new(&teacher.params, cfg.momentum);
    let mut best: Option<(usize, f64, Teacher)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch);
        let plan = epoch_plan(cfg.seed, epoch, train.len(), cfg.flip);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for_each_prefetched(
            plan.batches(cfg.batch_size),
            prefetch_threads(),
            |(idx, flips)| train.batch(&idx, &flips),
            |b, (x, labels)| -> Result<()> {
                let tape = Tape::new();
                let p = teacher.params.bind(&tape, true);
                let logits = teacher.forward(&p, tape.constant(x))?.logits;
                let loss = teacher_loss(logits, &labels, cfg.loss)?;
                let l = loss.item()?;
                if !l.is_finite() {
                    return Err(Error::Numerical(format!(
                        "teacher loss {l} at epoch {epoch}, batch {b}"
                    )));
                }
                loss_sum += l * labels.len() as f64;
                let c = teacher.arch.classes;
                correct += logits
                    .value()
                    .data()
                    .chunks(c)
                    .zip(&labels)
                    .filter(|(row, &y)| argmax(row) == y)
                    .count();
                let grads = tape.backward(loss)?;
                sgd.step_from(&mut teacher.params, &p, grads, lr)
            },
        )?;
        let val_acc = evaluate_teacher(&teacher, val)?;
        let record = TeacherEpoch {
            epoch: epoch + 1,
            loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_acc,
            lr,
        };
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|(_, acc, _)| val_acc > *acc) {
            best = Some((epoch + 1, val_acc, teacher.clone()));
        }
    }
    let (best_epoch, best_val_acc, teacher) = best.expect("at least one epoch ran");
    Ok(TeacherRun {
        teacher,
        best_epoch,
        best_val_acc,
        history,
    })
}
