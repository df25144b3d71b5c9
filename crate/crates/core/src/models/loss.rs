use serde::{Deserialize, Serialize};

use super::anchors::{AnchorAssignment, AnchorLabel};
use super::codec::encode;
use super::student::StudentOutput;
use crate::bbox::{Annotation, BoundingBox};
use crate::diffmath::{Tape, Tensor, Var};
use crate::error::{shape_err, Result};
use crate::kd_cls::HeadKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionLossConfig {
    /// Hard negatives kept per positive (categorical head).
    pub negative_ratio: usize,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub smooth_l1_beta: f64,
}

impl Default for DetectionLossConfig {
    fn default() -> Self {
        Self {
            negative_ratio: 3,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            smooth_l1_beta: 1.0 / 9.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DetectionLoss<'t> {
    pub classification: Var<'t>,
    pub localization: Var<'t>,
    pub total: Var<'t>,
}

/// A positive anchor located in the flattened `[N·A]` batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PositiveRef {
    pub flat: usize,
    pub image: usize,
    pub anchor: usize,
    pub gt: usize,
}

/// All positives of a batch in image-major, anchor-ascending order.
pub fn batch_positives(
    assignments: &[AnchorAssignment],
    anchors_per_image: usize,
) -> Vec<PositiveRef> {
    let mut out = Vec::new();
    for (image, a) in assignments.iter().enumerate() {
        for (&anchor, &gt) in a.positive_indices.iter().zip(&a.matched_gt) {
            out.push(PositiveRef {
                flat: image * anchors_per_image + anchor,
                image,
                anchor,
                gt,
            });
        }
    }
    out
}

/// Classification plus smooth-L1 box loss, both normalised by the number of
/// positives in the batch (at least 1).
pub fn detection_loss<'t>(
    out: &StudentOutput<'t>,
    anchors: &[BoundingBox],
    targets: &[Annotation],
    assignments: &[AnchorAssignment],
    kind: HeadKind,
    cfg: &DetectionLossConfig,
) -> Result<DetectionLoss<'t>> {
    let tape = out.logits.tape();
    let shape = out.logits.shape();
    let (n, a, d) = match shape[..] {
        [n, a, d] => (n, a, d),
        _ => return Err(shape_err!("logits must be [N, A, D], got {shape:?}")),
    };
    if a != anchors.len() || targets.len() != n || assignments.len() != n {
        return Err(shape_err!(
            "batch of {n} images x {a} anchors does not match {} anchors, {} targets, {} assignments",
            anchors.len(),
            targets.len(),
            assignments.len()
        ));
    }
    let positives = batch_positives(assignments, a);
    let norm = 1.0 / positives.len().max(1) as f64;
    let logits = out.logits.reshape(&[n * a, d])?;
    let classification = match kind {
        HeadKind::Categorical => categorical_term(logits, targets, assignments, a, cfg)?,
        HeadKind::Binary => focal_term(logits, targets, assignments, a, cfg)?,
    }
    .scale(norm)?;
    let localization = if positives.is_empty() {
        tape.scalar(0.0)
    } else {
        let flat: Vec<usize> = positives.iter().map(|p| p.flat).collect();
        let mut goal = Vec::with_capacity(4 * flat.len());
        for p in &positives {
            goal.extend(encode(&anchors[p.anchor], &targets[p.image].boxes[p.gt]));
        }
        let pred = out.offsets.reshape(&[n * a, 4])?.index_select(&flat)?;
        let goal = tape.constant(Tensor::new(&[flat.len(), 4], goal)?);
        pred.sub(goal)?
            .smooth_l1(cfg.smooth_l1_beta)?
            .sum()?
            .scale(norm)?
    };
    Ok(DetectionLoss {
        classification,
        localization,
        total: classification.add(localization)?,
    })
}

/// Cross-entropy on positives and on the hardest negatives of each image.
fn categorical_term<'t>(
    logits: Var<'t>,
    targets: &[Annotation],
    assignments: &[AnchorAssignment],
    a: usize,
    cfg: &DetectionLossConfig,
) -> Result<Var<'t>> {
    let d = logits.shape()[1];
    let background = d - 1;
    let logp = logits.log_softmax_t(1.0)?;
    let lp = logp.value();
    let mut mask = vec![0.0; lp.numel()];
    for (i, asg) in assignments.iter().enumerate() {
        for (&anchor, &gt) in asg.positive_indices.iter().zip(&asg.matched_gt) {
            mask[(i * a + anchor) * d + targets[i].labels[gt]] = 1.0;
        }
        let budget = cfg.negative_ratio * asg.num_positive().max(1);
        let mut negs: Vec<(f64, usize)> = asg
            .negatives
            .iter()
            .map(|&anchor| (-lp.data()[(i * a + anchor) * d + background], anchor))
            .collect();
        // Highest background loss first; anchor id breaks ties deterministically.
        negs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        for &(_, anchor) in negs.iter().take(budget) {
            mask[(i * a + anchor) * d + background] = 1.0;
        }
    }
    let mask = logits
        .tape()
        .constant(Tensor::new(&[lp.shape()[0], d], mask)?);
    logp.mul(mask)?.sum()?.neg()
}

/// Sigmoid focal loss over every non-ignored anchor and class.
fn focal_term<'t>(
    logits: Var<'t>,
    targets: &[Annotation],
    assignments: &[AnchorAssignment],
    a: usize,
    cfg: &DetectionLossConfig,
) -> Result<Var<'t>> {
    let c = logits.shape()[1];
    let rows = logits.shape()[0];
    let mut sign = vec![-1.0; rows * c];
    let mut weight = vec![0.0; rows * c];
    for (i, asg) in assignments.iter().enumerate() {
        for (anchor, label) in asg.labels.iter().enumerate() {
            let row = (i * a + anchor) * c;
            match *label {
                AnchorLabel::Ignored => {}
                AnchorLabel::Negative => weight[row..row + c].fill(1.0 - cfg.focal_alpha),
                AnchorLabel::Positive(gt) => {
                    weight[row..row + c].fill(1.0 - cfg.focal_alpha);
                    let cls = targets[i].labels[gt];
                    sign[row + cls] = 1.0;
                    weight[row + cls] = cfg.focal_alpha;
                }
            }
        }
    }
    let tape: &'t Tape = logits.tape();
    let shape = [rows, c];
    let s = logits.mul(tape.constant(Tensor::new(&shape, sign)?))?;
    let weight = tape.constant(Tensor::new(&shape, weight)?);
    // -(1 - p_t)^γ · log p_t with p_t = σ(s)
    let modulator = s.neg()?.sigmoid_t(1.0)?.powf(cfg.focal_gamma)?;
    modulator
        .mul(s.log_sigmoid_t(1.0)?)?
        .mul(weight)?
        .sum()?
        .neg()
}
