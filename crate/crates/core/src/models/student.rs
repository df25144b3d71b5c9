use rand::Rng;
use serde::{Deserialize, Serialize};

use super::anchors::{generate_anchors, AnchorSpec};
use super::codec::decode;
use super::params::{he_normal, ParamStore};
use crate::bbox::BoundingBox;
use crate::diffmath::{conv2d, sigmoid, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::eval::{nms, Detection};
use crate::kd_cls::HeadKind;

/// Three stride-2 convolution blocks followed by per-anchor classification
/// and box-offset heads on the final grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentArch {
    pub image_size: usize,
    pub classes: usize,
    pub head: HeadKind,
    pub channels: [usize; 3],
    pub anchors: AnchorSpec,
}

impl StudentArch {
    pub fn new(image_size: usize, classes: usize, head: HeadKind) -> Self {
        Self {
            image_size,
            classes,
            head,
            channels: [16, 32, 32],
            anchors: AnchorSpec {
                stride: 8,
                scales: vec![12.0, 24.0],
                ratios: vec![1.0],
            },
        }
    }

    /// Width of the classification output per anchor.
    pub fn class_columns(&self) -> usize {
        match self.head {
            HeadKind::Categorical => self.classes + 1,
            HeadKind::Binary => self.classes,
        }
    }

    pub fn grid(&self) -> usize {
        let mut side = self.image_size;
        for _ in 0..3 {
            side = (side - 1) / 2 + 1;
        }
        side
    }

    pub fn num_anchors(&self) -> usize {
        self.grid() * self.grid() * self.anchors.per_cell()
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if !self.image_size.is_multiple_of(8)
            || self.anchors.stride * self.grid() != self.image_size
        {
            return Err(Error::Config(format!(
                "anchor stride {} does not match the {}-cell output grid of a {}px image",
                self.anchors.stride,
                self.grid(),
                self.image_size
            )));
        }
        if self.anchors.per_cell() == 0 {
            return Err(Error::Config("anchor spec has no scales or ratios".into()));
        }
        Ok(())
    }
}

/// Raw head outputs; anchors are ordered as in [`generate_anchors`].
#[derive(Clone, Copy, Debug)]
pub struct StudentOutput<'t> {
    /// `[N, A, C+1]` (categorical) or `[N, A, C]` (binary).
    pub logits: Var<'t>,
    /// `[N, A, 4]`
    pub offsets: Var<'t>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Student {
    pub arch: StudentArch,
    pub params: ParamStore,
    anchors: Vec<BoundingBox>,
}

/// Settings for turning head outputs into detections.
#[derive(Clone, Debug, PartialEq)]
pub struct PostProcess {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for PostProcess {
    fn default() -> Self {
        Self {
            score_threshold: 0.01,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

/// Prior foreground probability used to initialise the classification bias.
const PRIOR: f64 = 0.01;

impl Student {
    pub fn new(arch: StudentArch, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let [c1, c2, c3] = arch.channels;
        let per = arch.anchors.per_cell();
        let d = arch.class_columns();
        let mut params = ParamStore::new();
        params.push("b1.weight", he_normal(rng, &[c1, 3, 3, 3], 27));
        params.push("b1.bias", Tensor::zeros(&[c1]));
        params.push("b2.weight", he_normal(rng, &[c2, c1, 3, 3], 9 * c1));
        params.push("b2.bias", Tensor::zeros(&[c2]));
        params.push("b3.weight", he_normal(rng, &[c3, c2, 3, 3], 9 * c2));
        params.push("b3.bias", Tensor::zeros(&[c3]));
        params.push(
            "cls.weight",
            he_normal(rng, &[per * d, c3, 3, 3], 9 * c3).map(|v| v * 0.1),
        );
        let prior_logit = ((1.0 - PRIOR) / PRIOR).ln();
        let cls_bias = Tensor::from_fn(&[per * d], |i| match arch.head {
            HeadKind::Binary => -prior_logit,
            // background is the last column of each anchor's block
            HeadKind::Categorical if i % d == d - 1 => prior_logit,
            HeadKind::Categorical => 0.0,
        });
        params.push("cls.bias", cls_bias);
        params.push(
            "box.weight",
            he_normal(rng, &[per * 4, c3, 3, 3], 9 * c3).map(|v| v * 0.1),
        );
        params.push("box.bias", Tensor::zeros(&[per * 4]));
        Self::from_params(arch, params)
    }

    /// Wraps existing parameters, e.g. loaded from a checkpoint.
    pub fn from_params(arch: StudentArch, params: ParamStore) -> Result<Self> {
        arch.validate()?;
        let anchors = generate_anchors(
            arch.image_size,
            arch.anchors.stride,
            &arch.anchors.scales,
            &arch.anchors.ratios,
        )?;
        Ok(Self {
            arch,
            params,
            anchors,
        })
    }

    pub fn anchors(&self) -> &[BoundingBox] {
        &self.anchors
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], images: Var<'t>) -> Result<StudentOutput<'t>> {
        let s = self.arch.image_size;
        let n = match images.shape()[..] {
            [n, 3, h, w] if h == s && w == s => n,
            ref other => {
                return Err(shape_err!(
                    "student expects [N, 3, {s}, {s}] input, got {other:?}"
                ))
            }
        };
        if p.len() != self.params.len() {
            return Err(shape_err!(
                "student expects {} parameters, got {}",
                self.params.len(),
                p.len()
            ));
        }
        let h = conv2d(images, p[0], Some(p[1]), 2, 1)?.relu()?;
        let h = conv2d(h, p[2], Some(p[3]), 2, 1)?.relu()?;
        let h = conv2d(h, p[4], Some(p[5]), 2, 1)?.relu()?;
        let a = self.anchors.len();
        let to_rows = |x: Var<'t>, width: usize| -> Result<Var<'t>> {
            x.permute(&[0, 2, 3, 1])?.reshape(&[n, a, width])
        };
        let logits = to_rows(
            conv2d(h, p[6], Some(p[7]), 1, 1)?,
            self.arch.class_columns(),
        )?;
        let offsets = to_rows(conv2d(h, p[8], Some(p[9]), 1, 1)?, 4)?;
        Ok(StudentOutput { logits, offsets })
    }

    /// Per-class scores of every anchor of one image, `[A, C]`.
    pub fn class_scores(&self, logits: &[f64]) -> Vec<f64> {
        let d = self.arch.class_columns();
        let c = self.arch.classes;
        let mut out = Vec::with_capacity(self.anchors.len() * c);
        for row in logits.chunks(d) {
            match self.arch.head {
                HeadKind::Binary => out.extend(row.iter().map(|&z| sigmoid(z))),
                HeadKind::Categorical => {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = row.iter().map(|&z| (z - m).exp()).collect();
                    let total: f64 = e.iter().sum();
                    out.extend(e[..c].iter().map(|v| v / total));
                }
            }
        }
        out
    }

    /// Decodes, thresholds and suppresses the raw outputs of one image.
    pub fn postprocess(
        &self,
        logits: &[f64],
        offsets: &[f64],
        cfg: &PostProcess,
    ) -> Vec<Detection> {
        let c = self.arch.classes;
        let size = self.arch.image_size as f64;
        let scores = self.class_scores(logits);
        let mut dets = Vec::new();
        for (a, anchor) in self.anchors.iter().enumerate() {
            let row = &scores[a * c..(a + 1) * c];
            if row.iter().all(|&s| s < cfg.score_threshold) {
                continue;
            }
            let b = decode(anchor, &offsets[4 * a..4 * a + 4]);
            let b = BoundingBox::new(b.x1.max(0.0), b.y1.max(0.0), b.x2.min(size), b.y2.min(size));
            if b.width() <= 0.0 || b.height() <= 0.0 {
                continue;
            }
            for (label, &score) in row.iter().enumerate() {
                if score >= cfg.score_threshold {
                    dets.push(Detection {
                        bbox: b,
                        label,
                        score,
                    });
                }
            }
        }
        let mut kept = nms(dets, cfg.nms_iou);
        kept.truncate(cfg.max_detections);
        kept
    }

    /// Inference on a batch `[N, 3, S, S]` without recording gradients.
    pub fn detect(&self, images: &Tensor, cfg: &PostProcess) -> Result<Vec<Vec<Detection>>> {
        let tape = crate::diffmath::Tape::new();
        let p = self.params.bind(&tape, false);
        let out = self.forward(&p, tape.constant(images.clone()))?;
        let (logits, offsets) = (out.logits.value(), out.offsets.value());
        let n = images.shape()[0];
        let (lw, ow) = (logits.numel() / n.max(1), offsets.numel() / n.max(1));
        Ok((0..n)
            .map(|i| {
                self.postprocess(
                    &logits.data()[i * lw..(i + 1) * lw],
                    &offsets.data()[i * ow..(i + 1) * ow],
                    cfg,
                )
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn student(head: HeadKind) -> Student {
        Student::new(
            StudentArch::new(64, 6, head),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap()
    }

    fn images(n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        Tensor::from_fn(&[n, 3, 64, 64], |_| rng.random::<f64>())
    }

    #[test]
    fn output_shapes_follow_the_anchor_grid() {
        for (head, d) in [(HeadKind::Categorical, 7), (HeadKind::Binary, 6)] {
            let s = student(head);
            assert_eq!(s.arch.num_anchors(), 8 * 8 * 2);
            assert_eq!(s.anchors().len(), 128);
            let tape = Tape::new();
            let p = s.params.bind(&tape, false);
            let out = s.forward(&p, tape.constant(images(2))).unwrap();
            assert_eq!(out.logits.shape(), vec![2, 128, d]);
            assert_eq!(out.offsets.shape(), vec![2, 128, 4]);
        }
    }

    #[test]
    fn zero_box_head_decodes_to_anchors() {
        let mut s = student(HeadKind::Binary);
        for name in ["box.weight", "box.bias"] {
            let i = s.params.names().iter().position(|n| n == name).unwrap();
            let shape = s.params.tensors()[i].shape().to_vec();
            s.params.tensors_mut()[i] = Tensor::zeros(&shape);
        }
        let tape = Tape::new();
        let p = s.params.bind(&tape, false);
        let out = s.forward(&p, tape.constant(images(1))).unwrap();
        assert!(out.offsets.value().data().iter().all(|&v| v == 0.0));
        let flat = out.offsets.reshape(&[128, 4]).unwrap();
        let boxes = super::super::codec::decode_boxes(s.anchors(), flat)
            .unwrap()
            .value();
        for (row, a) in boxes.data().chunks(4).zip(s.anchors()) {
            assert_eq!(row, &a.to_array());
        }
    }

    #[test]
    fn rejects_wrong_input_size() {
        let s = student(HeadKind::Categorical);
        let tape = Tape::new();
        let p = s.params.bind(&tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 3, 32, 32]));
        assert!(matches!(s.forward(&p, x), Err(Error::Shape(_))));
        let bad = StudentArch {
            anchors: AnchorSpec {
                stride: 16,
                scales: vec![12.0],
                ratios: vec![1.0],
            },
            ..StudentArch::new(64, 6, HeadKind::Binary)
        };
        assert!(Student::new(bad, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn untrained_scores_sit_near_the_prior() {
        for head in [HeadKind::Categorical, HeadKind::Binary] {
            let s = student(head);
            let dets = s.detect(&images(1), &PostProcess::default()).unwrap();
            assert_eq!(dets.len(), 1);
            assert!(dets[0].len() <= 100);
            assert!(dets[0].iter().all(|d| d.score < 0.2));
        }
    }
}
